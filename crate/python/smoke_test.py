"""Smoke test for the Python extension.

Build first:
    cargo build --release -p adaroute-py
    cp target/release/libadaroute_py.so python/adaroute_py.so
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import adaroute_py as ar  # noqa: E402


def main():
    cfg = json.loads(ar.default_config())
    cfg["train"].update(steps=4, batch_size=2, eval_every=0)
    cfg["task"]["eval_samples"] = 4

    model = ar.Model.from_config(json.dumps(cfg))
    rows = model.train()
    assert rows[-1][0] == 4 and rows[-1][2] is not None, rows
    assert model.step == 4

    x, targets = model.sample(0)
    logits = model.forward(x)
    assert logits.shape == [cfg["task"]["n_classes"], 16 * 16], logits.shape
    assert len(targets) == 16 * 16

    gates = model.expert_map([x], "G1", 0)
    assert all(abs(sum(row) - 1.0) < 1e-9 for row in gates)

    cka = model.cka(probes=4)
    assert all(abs(cka[i][i] - 1.0) < 1e-9 for i in range(len(cka)))
    erf = model.erf(0, probes=2)
    assert max(erf.data) == 1.0

    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        again = ar.Model.load(d)
        assert again.forward(x).data == logits.data
        assert again.step == 4

    total, text = ar.audit("swin-b")
    assert 3.8e6 <= total <= 5.5e6 and "published" in text

    t = ar.Tensor.randn([10, 4], 1)
    assert abs(ar.linear_cka(t, t) - 1.0) < 1e-9

    try:
        ar.Model.from_config('{"seed": 0, "unknown": 1}')
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")

    print("python smoke test ok")


if __name__ == "__main__":
    main()
