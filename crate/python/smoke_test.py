#!/usr/bin/env python3
"""End-to-end smoke test for the steerlab_py extension module.

Builds (or reuses) the cdylib via cargo, imports it, and walks the core
workflow on a small model: corpus -> train -> SAE -> vectors -> steering.

Run from the repository root:

    python3 python/smoke_test.py
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent


def load_module():
    lib = REPO_ROOT / "target" / "release" / "libsteerlab_py.so"
    if not lib.exists():
        print("building steerlab-py (release)...")
        subprocess.run(
            ["cargo", "build", "--release", "-p", "steerlab-py"],
            cwd=REPO_ROOT,
            check=True,
        )
    stage = Path(tempfile.mkdtemp(prefix="steerlab_py_"))
    shutil.copy2(lib, stage / "steerlab_py.so")
    sys.path.insert(0, str(stage))
    import steerlab_py

    return steerlab_py


def check(name, condition, detail=""):
    status = "ok" if condition else "FAIL"
    print(f"  [{status}] {name}" + (f" ({detail})" if detail else ""))
    if not condition:
        raise SystemExit(f"smoke test failed at: {name}")


def main():
    sl = load_module()
    print(f"imported steerlab_py (BOS={sl.BOS_TOKEN}, EOS={sl.EOS_TOKEN})")

    # Corpus + model ---------------------------------------------------------
    items, pos_lex, neg_lex = sl.generate_corpus(seed=0, n_items=24, vocab_size=32)
    check("corpus synthesized", len(items) == 24)
    check("lexicons disjoint", not set(pos_lex) & set(neg_lex))

    sequences = sl.training_sequences(items)
    model = sl.ToyModel(vocab_size=32, d_model=32, n_layers=2, n_heads=2, max_seq=48, seed=0)
    losses = model.train(sequences, steps=400, lr=3e-3)
    check("training reduces loss", losses[-1] < 0.5 * losses[0],
          f"{losses[0]:.3f} -> {losses[-1]:.3f}")

    # SAE --------------------------------------------------------------------
    acts = model.dump_activations(sequences, layer=0)
    sae, report = sl.Sae.train(acts, m_latent=96, gamma=0.02, steps=300, batch_size=64, seed=0)
    check("sae reconstruction improves",
          report["final_recon"] < 0.2 * report["initial_recon"],
          f"{report['initial_recon']:.2f} -> {report['final_recon']:.4f}")

    encoded = sae.encode(acts[:8])
    check("encode is nonnegative", all(v >= 0.0 for row in encoded for v in row))
    check("encode is sparse-capable", any(v == 0.0 for row in encoded for v in row))
    decoded = sae.decode(encoded)
    err = max(
        abs(a - b) for row_a, row_b in zip(acts[:8], decoded) for a, b in zip(row_a, row_b)
    )
    check("round trip is close", err < 2.0, f"max err {err:.3f}")

    # Gradient check ---------------------------------------------------------
    small_sae, _ = sl.Sae.train([[0.0] * 6] * 4, m_latent=12, steps=0)
    grad_err = sl.gradient_check(small_sae, [[0.1 * (i + j) for i in range(6)] for j in range(4)])
    check("gradient check tight", grad_err <= 1e-5, f"max rel err {grad_err:.2e}")

    # Vectors ----------------------------------------------------------------
    caa = sl.caa_vector(model, items, layer=0)
    sta = sl.sta_vector(model, sae, items, layer=0, top_fraction=0.35)
    ax = sl.axbench_vector(model, sae, items, layer=0)
    sta_all = sl.sta_vector(model, sae, items, layer=0, top_fraction=1.0)
    check("pass-all equals the all-atoms baseline", sta_all.values == ax.values)
    check("vector metadata recorded", sta.alpha is not None and sta.beta is not None)

    matched = sl.match_magnitude(sta, caa)
    check("magnitude matched", abs(matched.norm - caa.norm) < 1e-9,
          f"{matched.norm:.4f} vs {caa.norm:.4f}")

    # Steering ---------------------------------------------------------------
    prompts = [[sl.BOS_TOKEN] + list(item[0]) for item in items[:6]]
    up = sl.behavior_score(model, prompts, pos_lex, neg_lex, vector=matched, multiplier=2.0)
    down = sl.behavior_score(model, prompts, pos_lex, neg_lex, vector=matched, multiplier=-2.0)
    vanilla = sl.behavior_score(model, prompts, pos_lex, neg_lex)
    check("steering shifts behavior", up > vanilla > down,
          f"{down:.3f} < {vanilla:.3f} < {up:.3f}")

    greedy_a = model.generate(prompts[0], max_new=12)
    greedy_b = model.generate(prompts[0], max_new=12)
    check("greedy generation deterministic", greedy_a == greedy_b)
    steered = model.generate(prompts[0], max_new=12, vector=matched, multiplier=5.0)
    check("steered generation runs", len(steered) >= 1, f"{steered}")

    top = sl.topk_distribution(model, prompts[0], k=5)
    check("topk descending", all(top[i][1] >= top[i + 1][1] for i in range(len(top) - 1)))
    check("fluency metric", abs(sl.fluency_ngram([7, 7, 7, 7], 2) - 1 / 3) < 1e-12)

    # Prompt conversion ------------------------------------------------------
    demo = list(pos_lex)[:4]
    pv = sl.prompt_to_vector(model, demo, layer=0, method="caa")
    check("prompt vector built", pv.norm > 0.0 and not pv.degenerate)
    empty = sl.prompt_to_vector(model, [], layer=0, method="caa")
    check("empty prompt flagged degenerate", empty.degenerate and empty.norm == 0.0)

    # File pipeline ----------------------------------------------------------
    out_dir = Path(tempfile.mkdtemp(prefix="steerlab_run_"))
    config = """
seed = 5
[model]
vocab_size = 32
d_model = 16
n_layers = 2
n_heads = 2
max_seq = 32
[train]
steps = 30
[sae]
m_latent = 24
steps = 40
batch_size = 32
[corpus]
n_items = 8
vocab_size = 32
question_tokens = [20, 21, 22, 23]
question_len = [2, 3]
positive_tokens = [8, 9, 10, 11]
negative_tokens = [12, 13, 14, 15]
verbose_answer_len = [4, 6]
terse_answer_len = [1, 2]
[eval]
n_eval_prompts = 2
lambdas = [0.0, 1.0]
max_new = 4
n_gen_seeds = 2
"""
    stages = sl.run_pipeline(str(out_dir), config)
    check("pipeline ran", all(not skipped for _, skipped in stages), str(stages))
    stages = sl.run_pipeline(str(out_dir), config)
    check("pipeline resumes", all(skipped for _, skipped in stages), str(stages))
    vec = sl.SteeringVector.load(str(out_dir / "vector.json"))
    check("vector file loads", vec.norm > 0.0, repr(vec))

    print("smoke test passed")


if __name__ == "__main__":
    main()
