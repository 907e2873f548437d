"""Smoke test for the `doml` extension module."""
import json
import math

import doml


def check_interaction():
    for k in (1, 2, 8, 64):
        for b in (0.0, 0.5, 1.0, 6.0):
            fwd = doml.InteractionMatrix.forward(k, b)
            inv = doml.InteractionMatrix.inverse(k, b)
            for i in range(min(k, 3)):
                for j in range(min(k, 3)):
                    s = sum(fwd.entry(i, l) * inv.entry(l, j) for l in range(k))
                    assert abs(s - (1.0 if i == j else 0.0)) <= 1e-12
            assert inv.diag + (k - 1) * inv.offdiag == 1.0
    inv = doml.InteractionMatrix.inverse(2, 1.0)
    assert (inv.diag, inv.offdiag) == (0.75, 0.25)


def check_synth():
    origin = [0.0, 1.0, 1.0, 1.0, 1.0]
    assert abs(doml.boundary_h(0.0, origin) - 2.0) < 1e-12
    assert doml.label_point(0.0, 2.5, origin, 0.0) == 1
    assert doml.label_point(0.0, 0.0, origin, 0.0) == -1
    x = doml.lift_features(1.0, -2.0)
    assert x == [1.0, -2.0, -2.0, 1.0, 4.0, 1.0, -8.0, 4.0, -2.0]
    fam = doml.generate_family(4, 0.3, 7)
    assert len(fam) == 4 and fam[0] == (origin, 0.0)
    stream = doml.sample_stream(4, 0.3, 7, 2, 200)
    assert len(stream) == 200
    assert {y for _, y in stream} == {-1, 1}


def check_nodes():
    k, d = 4, 9
    stream = [(t, x, y) for t in range(k) for x, y in doml.sample_stream(k, 0.3, 3, t, 50)]
    hp = json.dumps({"buffer": 1})
    oml = doml.Oml(k, d, hp)
    master = doml.Master(k, d, 1, hp)
    worker = doml.Worker(0, k, d, 1)
    for seq, (t, x, y) in enumerate(stream):
        oml.step(seq, t, x, y)
        assert worker.ingest(seq, t, x, y)
        g = worker.flush(master.weight, master.round, k, d)
        assert g.support == [t]
        master.enqueue(seq, g)
        [u] = master.drain()
        assert min(u["outage"]) == 0
    assert master.weight == oml.weight
    assert sum(worker.seen) == len(stream)

    ol = doml.Ol(k, d)
    for seq, (t, x, y) in enumerate(stream):
        ol.step(seq, t, x, y)
    assert len(ol.weight) == d

    try:
        doml.Worker(0, k, d, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("buffer 0 accepted")


def check_experiment():
    cfg = json.loads(doml.default_config())
    cfg.update(k=8, n=2, samples_per_task=100)
    summary = doml.run_experiment(json.dumps(cfg))
    assert summary["samples"] == 800
    assert 0.0 <= summary["final_error"] <= 1.0
    assert not math.isnan(summary["final_error"])


if __name__ == "__main__":
    check_interaction()
    check_synth()
    check_nodes()
    check_experiment()
    print("smoke test ok")
