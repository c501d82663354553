"""Smoke test for the `cir` extension module.

    maturin develop --release -m crates/python/Cargo.toml
    python crates/python/python/smoke_test.py
"""

import json
import math
import tempfile

import cir


def main():
    spec = json.dumps({"train_queries": 16, "family_size": 5, "val_gallery": 10, "test_gallery": 10, "seed": 2})
    data = cir.Dataset.generate(spec)
    assert len(data.queries("train")) == 16
    assert len(data.gallery("test")) == 10
    shape, pixels = data.image(0)
    assert len(pixels) == math.prod(shape)

    with tempfile.TemporaryDirectory() as tmp:
        data.save(tmp)
        again = cir.Dataset.load(tmp)
        assert again.queries("test") == data.queries("test")

    config = json.dumps({"batch_size": 4, "max_epochs": 1, "seed": 2, "model": {"encoder": {"d": 16, "heads": 2}}})
    sets = cir.mine(data, config)
    assert len(sets) == 16 and all(s["pcs_texts"] for s in sets)

    model, metrics = cir.train(data, config)
    assert sorted(metrics["recall_at_k"]) == [1, 10, 50]
    assert len(metrics["loss_curve"]) == 1
    assert metrics["recall_at_k"] == model.evaluate(data, "test")["recall_at_k"]
    q = data.queries("test")[0]
    emb = model.query_embedding(data, q["reference_id"], q["text"])
    assert abs(sum(x * x for x in emb) - 1.0) < 1e-9
    ranked = model.retrieve(data, q["reference_id"], q["text"], "test")
    assert sorted(ranked) == sorted(data.gallery("test"))

    plan = cir.sinkhorn([[0.0, 1.0], [1.0, 0.0]], epsilon=0.05)
    assert plan["converged"] and plan["gamma"][0][0] > 0.49
    assert cir.recall_at_k([[2, 0, 1], [1, 2, 0]], [0, 0], 2) == 0.5

    rows = cir.grad_check("attention")
    assert rows and all(r["passed"] for r in rows)

    try:
        cir.Dataset.generate(json.dumps({"grid": 0}))
    except ValueError:
        pass
    else:
        raise AssertionError("bad spec accepted")
    print("smoke test ok")


if __name__ == "__main__":
    main()
