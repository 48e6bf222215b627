"""Acceptance criteria, one test each, run at their stated tolerances.

A one-line PASS/FAIL/SKIP summary per criterion is printed at the end of the
pytest run (see ``conftest.py``). Criteria 7 and 8 need external data:

* ``NSED_IELEX``: cognate word list (language, concept, tokens, cogid columns)
* ``NSED_FULL_SCALE=1`` plus ``NSED_TRANSLIT`` (a prepared transduction
  directory with train/valid/test.tsv) for the optional full-scale anchors
"""

import csv
import math
import os
import statistics
import time

import numpy as np
import pytest

from nsed import checkpoint, dp
from nsed.cli import main
from nsed.metrics import wer
from nsed.model import EditModel
from nsed.stat import OperationTable, e_step, m_step, train_em
from nsed.training import train
from nsed.transduction import BeamConfig, beam_search, decode_greedy, decode_greedy_batch

import gradcheck
import oracles
import test_cli
import test_training
import test_transduction

KINDS = ("unigram", "cnn", "rnn")
TASKS = ("match", "transduce")


def cli(*argv):
    return main([str(a) for a in argv])


def cli_metrics(capsys, *argv):
    code = cli(*argv)
    out = capsys.readouterr().out
    assert code == 0, f"{argv[0]} exited with {code}"
    return test_cli.metrics(out)


def test_criterion_01_oracle_equivalence(record_property):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for k in range(200):
        task, kind = TASKS[k % 2], KINDS[k % 3]
        model = gradcheck.small_model(task, kind, seed=k)
        n, m = (int(x) for x in rng.integers(0, 5, size=2))
        source = [int(x) for x in rng.integers(2, 5, size=n)]
        target = [int(x) for x in rng.integers(2, 5, size=m)]
        edges = model.grid(model.make_batch([source], [target])).edges()
        log_z, best, _, post = oracles.brute_force(edges.delete[0], edges.insert[0], edges.subst[0], n, m)

        alpha, beta = dp.forward(edges), dp.backward(edges)
        q, _ = dp.em_expected(edges, alpha, beta)
        got = [math.exp(alpha[0, n, m]), math.exp(dp.viterbi(edges)[0].log_score)]
        want = [math.exp(log_z), math.exp(best)]
        np.testing.assert_allclose(got, want, rtol=1e-8, atol=0)
        expected = oracles.expected_distribution(post)
        np.testing.assert_allclose(q[0, :n + 1, :m + 1], expected[:n + 1, :m + 1], rtol=1e-8, atol=1e-15)
        worst = max(worst, abs(got[0] - want[0]) / want[0])
    elapsed = time.perf_counter() - start
    record_property("detail", f"200 models, max rel err {worst:.1e}, {elapsed:.1f}s")
    assert elapsed < 60


def test_criterion_02_forward_backward(record_property):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n, m = (int(x) for x in rng.integers(0, 13, size=2))
        edges = dp.OpEdges.build(*oracles.random_edges(rng, n, m))
        gap = abs(dp.backward(edges)[0, 0, 0] - dp.forward(edges)[0, n, m])
        worst = max(worst, gap)
    elapsed = time.perf_counter() - start
    record_property("detail", f"1000 instances, max |beta - alpha| {worst:.1e}, {elapsed:.1f}s")
    assert worst < 1e-6
    assert elapsed < 60


def test_criterion_03_gradient_checks(record_property):
    start = time.perf_counter()
    failures, checked = [], 0
    for task in TASKS:
        for kind in KINDS:
            for component in gradcheck.COMPONENTS[task]:
                bad, count = gradcheck.check(task, kind, component, rtol=1e-3)
                failures += [(task, kind, component) + tuple(b) for b in bad]
                checked += count
    elapsed = time.perf_counter() - start
    record_property("detail", f"{checked} probes, {len(failures)} mismatches, {elapsed:.0f}s")
    assert not failures, failures[:5]
    assert elapsed < 300


def test_criterion_04_statistical_em(record_property):
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    sources, targets = [], []
    for _ in range(1000):
        s = [int(x) for x in rng.integers(0, 6, size=rng.integers(1, 8))]
        t = [(x + 2) % 6 for x in s if rng.random() > 0.1]
        if rng.random() < 0.3:
            t.insert(int(rng.integers(0, len(t) + 1)), int(rng.integers(0, 6)))
        sources.append(s)
        targets.append(t)
    trace = train_em(sources, targets, iterations=15, tol=-np.inf, n_src=6, n_tgt=6).trace
    drops = [a - b for a, b in zip(trace, trace[1:]) if b < a - 1e-9]

    table = m_step(e_step(OperationTable.uniform(1, 1), [[0]], [[0]]).counts)
    toy = (table.subst[0, 0], table.delete[0], table.insert[0])
    elapsed = time.perf_counter() - start
    record_property("detail", f"{len(trace)} iterations monotone={not drops}; "
                              f"toy (sub, del, ins) = ({toy[0]:.4f}, {toy[1]:.4f}, {toy[2]:.4f})")
    assert not drops
    assert elapsed < 60
    np.testing.assert_allclose(toy, (0.6, 0.2, 0.2), rtol=1e-12)


def test_criterion_05_decoding(record_property):
    start = time.perf_counter()
    for kind in KINDS:
        for seed in range(4):
            model = test_transduction.random_model(seed, kind, tgt_vocab=5)
            for source in ([2, 3, 4], [4], [], [3, 3, 2, 4]):
                greedy = decode_greedy(model, source, max_len=6)
                beam = beam_search(model, source, BeamConfig(beam=1, len_norm=0.0, max_len=6))
                assert (greedy.symbols, greedy.log_prob, greedy.finished) == \
                       (beam.symbols, beam.log_prob, beam.finished)

    exhaustive = 0
    for seed in range(4):
        model = test_transduction.random_model(seed, "unigram", tgt_vocab=4)
        for source in ([2, 4], [3]):
            for len_norm in (0.0, 1.0):
                score, body = test_transduction.exhaustive(model, source, 3, len_norm)
                found = beam_search(model, source, BeamConfig(beam=27, len_norm=len_norm, max_len=3))
                assert found.symbols == body
                assert found.score == pytest.approx(score, abs=1e-6)
                exhaustive += 1

    decreases = 0
    for seed in range(20):
        model = test_transduction.random_model(seed, "unigram", tgt_vocab=5, spread=2.0)
        scores = [beam_search(model, [2, 3, 4], BeamConfig(beam=k, len_norm=0.0, max_len=5)).score
                  for k in range(1, 7)]
        decreases += sum(b < a - 1e-12 for a, b in zip(scores, scores[1:]))
    elapsed = time.perf_counter() - start
    record_property("detail", f"{exhaustive} exhaustive instances matched, "
                              f"{decreases} score decreases in k, {elapsed:.0f}s")
    assert decreases == 0
    assert elapsed < 60


def test_criterion_06_overfit_copy_task(tmp_path, record_property):
    start = time.perf_counter()
    config = test_training.small_config(embed_dim=16, hidden_dim=16)
    model = EditModel("transduce", config.encoder_config(32), 8, 8, seed=config.seed)
    pairs = test_training.copy_pairs()
    out = tmp_path / "copy.nsed"
    result = train(model, config, pairs, [(s, [t]) for s, t in pairs], max_steps=500, out=str(out))
    model.params = checkpoint.load(out)[0]
    hyps = decode_greedy_batch(model, [s for s, _ in pairs], max_len=12)
    score = wer([h.symbols for h in hyps], [[t] for _, t in pairs])
    elapsed = time.perf_counter() - start
    record_property("detail", f"WER {score} at step {result.best_step}, {elapsed:.0f}s")
    assert score == 0.0
    assert result.best_step <= 500
    assert elapsed < 120


def _train_match(capsys, tmp_path, data, encoder, steps):
    cfg = test_cli.config_file(tmp_path, task="match", encoder=encoder, embed_dim=64, hidden_dim=64,
                               layers=0 if encoder == "unigram" else 1, lr=0.001, batch_size=32,
                               validate_every=max(steps // 10, 1))
    cfg = cfg.rename(tmp_path / f"{encoder}.cfg")
    out = tmp_path / f"{encoder}.nsed"
    cli_metrics(capsys, "train", "--task", "match", "--config", cfg, "--data", data, "--out", out,
                "--max-steps", steps, "--threads", 1)
    return float(cli_metrics(capsys, "eval", "--model", out, "--data", data, "--split", "test")["f1"])


def test_criterion_07_desk_scale_cognates(tmp_path, capsys, record_property):
    source = os.environ.get("NSED_IELEX")
    if not source:
        record_property("detail", "NSED_IELEX is not set; the cognate word list is not available offline")
        pytest.fail("set NSED_IELEX to the cognate word list to run this criterion")
    start = time.perf_counter()
    steps = int(os.environ.get("NSED_IELEX_STEPS", "3000"))
    data = tmp_path / "ielex"
    # ten negatives per positive, 50k pairs in total
    cli_metrics(capsys, "prepare-cognates", "--input", source, "--out", data, "--max-positives", 50_000 // 11)
    stat = float(cli_metrics(capsys, "em-train", "--data", data, "--out", tmp_path / "em.json")["test_f1"])
    scores = {kind: _train_match(capsys, tmp_path, data, kind, steps) for kind in KINDS}
    elapsed = time.perf_counter() - start
    record_property("detail", f"stat {100 * stat:.1f}, " + ", ".join(f"{k} {100 * v:.1f}" for k, v in scores.items())
                    + f" F1, {elapsed / 60:.0f} min")
    assert stat < scores["unigram"] < scores["cnn"] <= scores["rnn"]
    assert scores["unigram"] - stat >= 0.25
    assert elapsed <= 7200


@pytest.mark.skipif(not os.environ.get("NSED_FULL_SCALE"), reason="optional; set NSED_FULL_SCALE=1 to run")
def test_criterion_08_full_scale_anchors(tmp_path, capsys, record_property):
    translit, ielex = os.environ.get("NSED_TRANSLIT"), os.environ.get("NSED_IELEX")
    if not (translit and ielex):
        pytest.fail("NSED_FULL_SCALE needs NSED_TRANSLIT and NSED_IELEX")
    steps = int(os.environ.get("NSED_FULL_STEPS", "100000"))
    cfg = test_cli.config_file(tmp_path, encoder="rnn", embed_dim=256, hidden_dim=256, layers=2, heads=4,
                               lr=0.0001, batch_size=512, validate_every=500, patience=10, max_decays=10)
    out = tmp_path / "translit.nsed"
    cli_metrics(capsys, "train", "--config", cfg, "--data", translit, "--out", out, "--max-steps", steps)
    cer = 100 * float(cli_metrics(capsys, "eval", "--model", out, "--data", translit)["cer"])

    data = tmp_path / "ielex"
    cli_metrics(capsys, "prepare-cognates", "--input", ielex, "--out", data)
    cfg = test_cli.config_file(tmp_path, task="match", encoder="rnn", embed_dim=256, hidden_dim=256, layers=2,
                               heads=4, lr=0.0001, batch_size=512, validate_every=500, patience=10, max_decays=10)
    out = tmp_path / "ielex.nsed"
    cli_metrics(capsys, "train", "--task", "match", "--config", cfg, "--data", data, "--out", out,
                "--max-steps", steps)
    f1 = 100 * float(cli_metrics(capsys, "eval", "--model", out, "--data", data)["f1"])
    record_property("detail", f"transliteration CER {cer:.1f}, cognate F1 {f1:.1f}")
    assert 21 <= cer <= 28
    assert f1 >= 93


INTERP_STEPS = 2500
INTERP_VALIDATE = 500


def test_criterion_09_interpretability(tmp_path, record_property):
    pytest.importorskip("cmudict")
    pytest.importorskip("eflomal")
    import alignment_support as support

    start = time.perf_counter()
    pairs = support.cmudict_pairs()
    references = support.reference_alignments(pairs)
    gains, rows = [], []
    for seed in (1, 2, 3):
        train_idx, valid_idx, test_idx = support.split_indices(len(pairs), (10_000, 300, 1_000), seed)
        f1 = {}
        for w in (0.0, 0.1):
            f1[w], _ = support.interpretability_run(pairs, references, train_idx, valid_idx, test_idx, w, seed,
                                                    steps=INTERP_STEPS, validate_every=INTERP_VALIDATE,
                                                    workdir=tmp_path)
        gains.append(100 * (f1[0.1] - f1[0.0]))
        rows.append(f"{100 * f1[0.0]:.1f}->{100 * f1[0.1]:.1f}")
    elapsed = time.perf_counter() - start
    median = statistics.median(gains)
    record_property("detail", f"alignment F1 w=0 -> w=0.1 per seed {', '.join(rows)}; "
                              f"median gain {median:+.1f} points, {elapsed / 60:.0f} min")
    assert median >= 1.0
    assert elapsed <= 7200


def test_criterion_10_round_trip_and_replay(tmp_path, capsys, record_property):
    data = test_cli.copy_data(tmp_path)
    cfg = test_cli.config_file(tmp_path, validate_every=10)
    logs = []
    for k in range(2):
        log = tmp_path / f"run{k}.csv"
        cli_metrics(capsys, "train", "--config", cfg, "--data", data, "--out", tmp_path / f"m{k}", "--log", log,
                    "--max-steps", 60, "--threads", 1, "--max-len", 12)
        logs.append(log.read_bytes())
    rows = list(csv.DictReader(open(tmp_path / "run0.csv")))
    logged = min(float(r["metric"]) for r in rows)
    evaluated = float(cli_metrics(capsys, "eval", "--model", tmp_path / "m0", "--data", data,
                                  "--split", "valid")["cer"])
    record_property("detail", f"logged CER {logged!r}, reloaded CER {evaluated!r}, "
                              f"identical logs {logs[0] == logs[1]}")
    assert evaluated == logged
    assert logs[0] == logs[1]
