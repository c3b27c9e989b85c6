#!/usr/bin/env python3
"""Smoke test for the prefax_py extension module.

Builds nothing itself: run `cargo build -p prefax-py` first, then
`python3 python/smoke_test.py`. The script locates the cdylib under
target/, exposes it as an importable module, and exercises the bound
types and functions.
"""
import math
import os
import shutil
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_prefax_py():
    candidates = [
        os.path.join(REPO, "target", profile, name)
        for profile in ("debug", "release")
        for name in ("libprefax_py.so", "libprefax_py.dylib", "prefax_py.dll")
    ]
    built = next((c for c in candidates if os.path.exists(c)), None)
    if built is None:
        sys.exit("build the extension first: cargo build -p prefax-py")
    stage = tempfile.mkdtemp(prefix="prefax_py_")
    suffix = ".pyd" if built.endswith(".dll") else ".so"
    shutil.copy(built, os.path.join(stage, "prefax_py" + suffix))
    sys.path.insert(0, stage)
    import prefax_py

    return prefax_py


def main():
    px = import_prefax_py()

    # margins
    assert px.upvote_margin(10, 1) == 1.0
    assert abs(px.upvote_margin(15, 4) - math.log10(15 / 4)) < 1e-12
    assert px.ai_feedback_margin(80, 75) == 0.25
    assert px.ai_feedback_margin(80, 76) is None

    # utilization: identity, disjoint, and the accepted band
    a = "alpha beta gamma delta"
    b = "epsilon zeta eta theta"
    assert px.utilization(a, a, a) == 2.0
    assert px.utilization("iota kappa lambda", a, b) == 0.0
    mid = px.utilization("alpha beta epsilon zeta", a, b)
    assert 0.35 < mid < 1.85, mid

    # ranking metrics: (scores, gains, target_index)
    tasks = [
        ([0.9, 0.1], [1.0, 2.0], 1),  # target ranked second
        ([0.9, 0.1], [2.0, 1.0], 0),  # target ranked first
    ]
    assert abs(px.mrr(tasks) - 0.75) < 1e-12
    assert 0.0 <= px.ndcg(tasks) <= 1.0

    # prompt templates render and the tagged output parses back
    prompt = px.render_prompt(
        "combine_answers",
        {"Question": "why?", "AnswerA": "first", "AnswerB": "second"},
    )
    assert "first" in prompt and "second" in prompt
    spans = px.parse_tagged("<Claim>one</Claim><Claim>two</Claim>", "Claim")
    assert spans == ["one", "two"]
    sa, sb, _ca, _cb = px.parse_critique_scores(
        "<CritiqueA>x</CritiqueA><CritiqueB>y</CritiqueB><ScoreA>87</ScoreA><ScoreB>62</ScoreB>"
    )
    assert (sa, sb) == (87, 62)

    # html stripping keeps code and decodes entities
    text = px.strip_html("<p>Use <code>x &lt; y</code> here.</p>")
    assert "x < y" in text and "<p>" not in text

    # train a tiny scorer on a separable toy task and check it orders pairs
    pairs = [
        (
            f"q{i}",
            f"question topic {i % 3}",
            f"precise cited thorough answer {i}",
            f"vague offtopic filler reply {i}",
            0.25,
        )
        for i in range(12)
    ]
    scorer = px.Scorer(hash_bits=14, seed=7)
    losses = scorer.train(pairs, learning_rate=0.5, warmup_steps=20, total_steps=400, seed=7)
    assert losses[-1] <= losses[0]
    good = scorer.score("question topic 0", "precise cited thorough answer 99")
    bad = scorer.score("question topic 0", "vague offtopic filler reply 99")
    assert good > bad, (good, bad)
    assert scorer.pair_loss("question topic 0", "precise cited", "vague filler", 0.25) >= 0.0

    # checkpoints round-trip exactly
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        scorer.save(path)
        loaded = px.Scorer.load(path)
        q, ans = "question topic 1", "precise cited thorough answer 5"
        assert loaded.score(q, ans) == scorer.score(q, ans)

    print("prefax_py smoke test: all checks passed")


if __name__ == "__main__":
    main()
