"""Smoke test for the edgesim extension module.

Build and install first:

    pip install maturin
    maturin develop -m crates/py/Cargo.toml    # or: pip install --no-build-isolation crates/py
"""

import edgesim

STIMULI = ["EL", "EH", "SL", "SH"]


def main():
    print(f"surface step {edgesim.surface_mm_per_step():.3f} mm")
    print(f"edge output step {edgesim.edge_effective_step_deg():.4f} deg")
    print(f"edge force at max tension {edgesim.edge_net_force_n(2.21):.4f} N")
    print(f"endurance {edgesim.endurance_h():.2f} h")

    line = edgesim.encode({"type": "move", "surface_mm": 0.35})
    assert edgesim.decode(line) == {"type": "move", "surface_mm": 0.35}

    device = edgesim.Device()
    device.calibrate("surface")
    device.calibrate("edge")
    train = [(c, f) for c in STIMULI for f in device.settled_frames(c, 20)]
    test = [(c, f) for c in STIMULI for f in device.settled_frames(c, 50)]
    classifier = edgesim.Classifier.calibrate(train)
    report = classifier.evaluate(test)
    print(f"4-way accuracy {report['condition_accuracy']:.1%}")
    assert report["condition_accuracy"] >= 0.95

    log = edgesim.run_sim_session(seed=7)
    stats = log["stats"]
    print(f"session: {len(log['records'])} trials, accuracy {stats['overall_accuracy']:.0%}")
    assert log["complete"] and stats["overall_accuracy"] == 1.0
    assert edgesim.compute_stats(log["records"]) == stats

    confused = edgesim.run_sim_session(seed=7, responder="confusion:SH->SL:0.5")
    sh = next(c for c in confused["stats"]["per_condition"] if c["condition"] == "SH")
    print(f"SH accuracy with confusion {sh['accuracy']:.0%}")
    print("ok")


if __name__ == "__main__":
    main()
