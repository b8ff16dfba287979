"""End-to-end smoke test of the Python bindings on the bundled fixture."""

import pathlib
import sys
import tempfile

import hetserve_py as hs

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"


def main() -> int:
    spec = hs.ClusterSpec.load(str(FIXTURES / "cluster.json"))
    trace = hs.Trace.load(str(FIXTURES / "trace.jsonl"), spec.models)
    print(f"models={spec.models} gpus={spec.gpus} queries={len(trace)}")

    tau = trace.fractions_to_thresholds([0.5, 0.5])
    f = trace.thresholds_to_fractions(tau)
    assert abs(f[0] - 0.5) <= 1.0 / len(trace), f
    print(f"tau={tau} quality={trace.estimate_quality(tau):.4f}")

    sim = hs.simulate(spec, trace, spec.models[0], spec.gpus[0], 4.0, seed=3)
    print(f"simulate p95={sim['quantiles'][3]:.4f}s saturated={sim['saturated']}")

    db = hs.PerfDb.build(spec, trace, loads="2:20:2", seed=3)
    rec = db.lookup(spec.models[0], spec.gpus[0], 4.0)
    assert abs(rec["quantiles"][3] - sim["quantiles"][3]) < 1e-9

    cands = hs.CandidateSet.generate(db, 30.0, ref_load=8.0)
    print({m: len(ids) for m, ids in cands.ids().items()})

    front = hs.optimize(trace, db, cands, 16.0, 30.0, iters=6, seed=5)
    print(f"frontier points={len(front)} hv={front.hypervolume:.4f}")
    records = front.records()
    assert records and all(r["l_p95_s"] > 0 for r in records)

    qmin = min(r["q"] for r in records)
    plan = front.select(qmin=qmin)
    report = plan.replay(trace, spec, seed=0)
    assert abs(report["q"] - plan.predicted_q) < 1e-12
    print(f"plan L={plan.predicted_l_p95_s:.3f}s Q={plan.predicted_q:.4f} replay L={report['l_p95_s']:.3f}s")

    with tempfile.TemporaryDirectory() as d:
        db.save(f"{d}/db.bin")
        assert hs.PerfDb.load(f"{d}/db.bin").digest() == db.digest()
        plan.save(f"{d}/plan.json")
        assert hs.Plan.load(f"{d}/plan.json").thresholds == plan.thresholds

    try:
        front.select(qmin=1.5)
    except hs.InfeasibleError as e:
        print(f"unsatisfiable as expected: {e}")
    else:
        raise AssertionError("qmin 1.5 should be unsatisfiable")

    assert hs.hypervolume_2d([(1.0, 1.0)], (2.0, 3.0)) == 2.0
    assert hs.pareto_skim([(3.0, 1.0), (2.0, 2.0), (4.0, 2.0)]) == [0, 1]
    print("OK")
    return 0


if __name__ == "__main__":
    sys.exit(main())
