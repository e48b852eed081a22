"""Smoke test for the moelab_py extension module."""

import json
import math
import os
import tempfile

import moelab_py as ml


def main():
    names = [c[0] for c in ml.criteria()]
    assert len(names) == 16 and "EAN" in names

    assert abs(ml.stable_rank([[1.0 if i == j else 0.0 for j in range(8)] for i in range(8)]) - 8.0) < 1e-9
    assert abs(ml.stable_rank([[2, 0, 0], [0, 1, 0], [0, 0, 1]]) - 1.5) < 1e-10

    experts, aff, probs = ml.gate([[1.0, 0.0, -1.0, 0.5]], [2.0], 2)
    assert experts == [0, 3]
    assert abs(sum(probs) - 1.0) < 1e-12 and aff == [probs[0], probs[3]]

    assert ml.select_drop([3.0, 1.0, 2.0, 1.0], "min", 2, 2) == [1, 3]
    assert ml.select_drop([3.0, 1.0, 2.0, 1.0], "max", 1, 2) == [0]

    corpus = ml.Corpus.synthetic(40000, 3)
    model = ml.Model(d_model=8, n_layers=2, n_experts=4, d_hidden=8, seq_len=16, seed=1)
    before = model.perplexity(corpus, 4)
    model.pretrain(corpus, 4000)
    after = model.perplexity(corpus, 4)
    assert math.isfinite(after) and after < before

    logits = model.forward([72, 101, 108, 108, 111])
    assert len(logits) == 5 and len(logits[0]) == 256

    stats = ml.calibrate(model, corpus, sequences=4)
    assert all(sum(stats.usage(l)) == stats.token_total * 2 for l in range(2))
    scores = ml.score(model, "EAN", stats)
    assert len(scores) == 2 and len(scores[0]) == 4

    pruned, plan = ml.one_shot(model, "EAN", 0.5, corpus, sequences=4)
    assert json.loads(plan)["strategy"] == "oneshot"
    assert [len(ids) for ids in pruned.identity_map()] == [2, 2]

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.moel")
        pruned.save(path, "f64")
        assert ml.Model.load(path).digest() == pruned.digest()

    try:
        ml.score(model, "XYZ")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown criterion accepted")

    print("smoke test ok:", ml.__version__, f"ppl {before:.2f} -> {after:.2f}")


if __name__ == "__main__":
    main()
