"""Smoke test for the attempt_py extension: closed forms, accounting and a tiny end-to-end run."""

import json
import pathlib
import random
import tempfile

import attempt_py

CONFIG = """
output_dir = "out"

[lm]
model_dim = 16
n_layers = 1
n_heads = 2
ff_dim = 32
max_len = 48

[train]
epochs = 1
batch_size = 8
prompt_length = 3
bottleneck = 4
eval_limit = 6
warmup_steps = 0

[[tasks]]
id = "copy"
kind = "copy"
size = 40
seed = 1

[[tasks]]
id = "sort"
kind = "sort"
size = 40
seed = 2

[[tasks]]
id = "reverse"
role = "target"
kind = "reverse"
size = 40
seed = 3
"""


def rand_prompt(rng, m, d):
    return [[rng.gauss(0, 1) for _ in range(d)] for _ in range(m)]


def main():
    counts = attempt_py.param_count(768, 100, 100)
    assert counts["total"] == 231_936, counts
    assert counts["prompt_tuning"] == 76_800, counts

    rng = random.Random(0)
    bank = [rand_prompt(rng, 4, 16) for _ in range(3)]
    target = rand_prompt(rng, 4, 16)
    doubled = attempt_py.interpolate(bank, target, [0, 0, 0, 1])
    for row, t in zip(doubled, target):
        assert all(abs(a - 2 * b) < 1e-9 for a, b in zip(row, t))

    same = [target] * 3
    a = attempt_py.attention_weights(same, target, rand_prompt(rng, 5, 16), bottleneck=5)
    assert all(abs(w - 0.25) < 1e-6 for w in a), a

    x1, x2 = rand_prompt(rng, 5, 16), rand_prompt(rng, 5, 16)
    a1 = attempt_py.attention_weights(bank, target, x1, bottleneck=5)
    a2 = attempt_py.attention_weights(bank, target, x2, bottleneck=5)
    assert abs(sum(a1) - 1) < 1e-9
    assert max(abs(p - q) for p, q in zip(a1, a2)) > 1e-9

    with tempfile.TemporaryDirectory() as tmp:
        cfg = pathlib.Path(tmp) / "exp.toml"
        cfg.write_text(CONFIG)
        built = json.loads(attempt_py.build_lm(str(cfg)))
        assert built["trainable_params"] == 0
        header = json.loads(attempt_py.checkpoint_header(built["path"]))
        assert header["theta_hash"] == built["theta_hash"]
        sources = json.loads(attempt_py.train_source(str(cfg)))
        assert [r["task_ids"] for r in sources] == [["copy"], ["sort"]]
        targets = json.loads(attempt_py.train_target(str(cfg)))
        assert targets[0]["regime"] == "target"
        evals = json.loads(attempt_py.evaluate(str(cfg)))
        assert abs(sum(evals[0]["mean_attention"]) - 1) < 1e-6
        try:
            attempt_py.train_target(str(cfg), ablation="bogus")
        except ValueError:
            pass
        else:
            raise AssertionError("bad ablation accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
