"""Acceptance checks, one test per criterion.

Each test is tagged ``@pytest.mark.criterion(n, title)``; the conftest prints a
PASS/FAIL summary line for each at the end of the run. The experiment-sized
ones are also tagged ``slow`` (deselect with ``-m "not slow"`` for quick runs).
"""

import math
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from seqkd import tensorcore as tc
from seqkd.corpus import prepare_dataset, save_dataset, save_token_map, split_leave_one_out
from seqkd.distill import DistillConfig, combined_loss, distill, hard_loss, soft_loss
from seqkd.evaluate import evaluate_scores, hr_at_k, model_score_fn, ndcg_at_k, ranked_candidates
from seqkd.experiments import PipelineConfig, apply_axis, run_pipeline, stability_experiment, sweep
from seqkd.masking import MASK, mask_batch
from seqkd.model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from seqkd.service import ServingBundle, bench, create_app
from seqkd.synthetic import cyclic_sequences, markov_sequences
from seqkd.train import TrainConfig, mlm_batch_loss, train
from oracles import brute_force_rank, model_grad_error, op_cases, op_grad_errors
from test_evaluate import random_scoring_hr10
from test_masking import masking_shares

SEEDS = range(5)


def criterion(number, title):
    return pytest.mark.criterion(number, title)


@criterion(1, "finite-difference gradients of every op and the toy model")
def test_gradient_correctness(record_property):
    t0 = time.perf_counter()
    worst = {}
    for seed in SEEDS:
        for name, op, arrays in op_cases(np.random.default_rng(seed)):
            errs = op_grad_errors(op, arrays, seed)
            worst[name] = max(worst.get(name, 0.0), *errs.values())
        for variant, kw in (("model", {}), ("model_untied", {"tie_output_to_embedding": False})):
            worst[variant] = max(worst.get(variant, 0.0), *model_grad_error(seed, **kw).values())
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    record_property("detail", f"max rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s")
    assert all(v < 1e-6 for v in worst.values()), worst
    assert elapsed < 60


@criterion(2, "masking selection rate and 80/10/10 shares")
def test_masking_statistics(record_property):
    seq = np.random.default_rng(0).integers(2, 1002, size=50)
    rate, (m, r, k) = masking_shares(seq, 0.55, 10_000, 1002, seed=7)
    record_property("detail", f"rate {rate:.4f}, shares {m:.4f}/{r:.4f}/{k:.4f}")
    assert abs(rate - 0.55) <= 0.02
    assert abs(m - 0.80) <= 0.02 and abs(r - 0.10) <= 0.02 and abs(k - 0.10) <= 0.02


@criterion(3, "combined/hard/soft loss identities")
def test_loss_identities(record_property):
    worst_entropy_gap = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        z_s, z_t = rng.normal(size=(6, 40)) * 2, rng.normal(size=(6, 40)) * 2
        labels = rng.integers(0, 40, size=6)
        hard = hard_loss(z_s, labels).item()
        for other_t, T in ((z_t, 1.5), (rng.normal(size=(6, 40)), 0.2), (None, 9.0)):
            assert combined_loss(z_s, other_t, labels, 1.0, T).item() == hard
        assert combined_loss(z_s, z_t, labels, 0.0, 1.0).item() == soft_loss(z_s, z_t, 1.0).item()
        for T in (0.5, 1.0, 1.5, 4.0):
            entropy = tc.entropy(tc.softmax_rows(z_t, T).data).mean()
            worst_entropy_gap = max(worst_entropy_gap, abs(soft_loss(z_t, z_t, T).item() - entropy))
    record_property("detail", f"max |soft(z,z)-H| {worst_entropy_gap:.1e}")
    assert worst_entropy_gap < 1e-10


@criterion(4, "T^2 compensation of soft-loss gradients")
def test_t2_compensation(record_property):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(100 + seed)
        z_s, z_t = rng.normal(size=(1, 64)), rng.normal(size=(1, 64))
        norms = []
        for T in (100.0, 1000.0):
            zs = tc.Tensor(z_s, requires_grad=True)
            with tc.GradTape() as tape:
                loss = tc.scale(soft_loss(zs, z_t, T), T * T)
            norms.append(np.linalg.norm(tape.backward(loss)[zs]))
        worst = max(worst, abs(norms[0] - norms[1]) / norms[1])
    record_property("detail", f"max relative gap {worst:.2e}")
    assert worst < 0.05


@criterion(5, "HR/NDCG against a brute-force full sort, plus anchors")
def test_metric_oracle(record_property):
    data = split_leave_one_out(markov_sequences(400, 200, 4, 10, seed=3), n=10, seed=1)
    assert data.token_map.num_items <= 200
    rng = np.random.default_rng(5)
    scores = rng.integers(0, 30, size=(data.num_users, data.vocab_size)).astype(float)  # heavy ties
    report = evaluate_scores(lambda inputs: scores[: len(inputs)], data, "test", (1, 5, 10, 20),
                             batch_size=data.num_users, keep_ranks=True)
    oracle_ranks = [brute_force_rank(list(s), int(t)) for s, t in zip(scores, data.test)]
    np.testing.assert_array_equal(report.ranks, oracle_ranks)
    for k in (1, 5, 10, 20):
        hr = math.fsum(1.0 for r in oracle_ranks if r <= k) / len(oracle_ranks)
        ndcg = math.fsum(1.0 / math.log2(r + 1) for r in oracle_ranks if r <= k) / len(oracle_ranks)
        assert report.metrics[f"HR@{k}"] == pytest.approx(hr, rel=1e-15, abs=0)
        assert report.metrics[f"NDCG@{k}"] == pytest.approx(ndcg, rel=1e-15, abs=0)
    assert ndcg_at_k(1, 10) == 1.0 and ndcg_at_k(3, 10) == 0.5 and hr_at_k(6, 5) == 0.0
    record_property("detail", f"{data.num_users} users, V={data.vocab_size}, ranks identical")


@criterion(6, "random-scoring calibration of HR@10")
def test_random_scoring_calibration(record_property):
    hr, p, sigma = random_scoring_hr10(num_users=2400, num_items=100, seed=0)
    record_property("detail", f"HR@10 {hr:.4f} vs {p:.2f} (3 sigma = {3 * sigma:.4f})")
    assert abs(hr - p) < 3 * sigma


@pytest.mark.slow
@criterion(7, "overfit: masked-item loss below 0.1 ln V within 150 epochs")
def test_overfit_smoke(record_property):
    t0 = time.perf_counter()
    data = split_leave_one_out(cyclic_sequences(64, 50, 14, seed=0), n=12)
    V = data.vocab_size
    config = ModelConfig(num_layers=2, hidden_dim=64, num_heads=4, vocab_size=V, max_len=12, dropout_rate=0.0)
    loss_fn = mlm_batch_loss(config)
    probe = mask_batch(data.train, 0.55, 999, 1, range(len(data.train)), V)

    def neg_loss(params):
        with tc.no_grad():
            return -loss_fn(params, probe.inputs, probe.labels, None).item()

    cfg = TrainConfig(learning_rate=3e-3, batch_size=8, max_epochs=150, patience=150, rho=0.55, seed=0)
    _, hist = train((init_params(config, 0), config), data, cfg, metric_fn=neg_loss)
    loss, elapsed = -hist.best_metric, time.perf_counter() - t0
    record_property("detail", f"loss {loss:.4f} < {0.1 * math.log(V):.4f} at epoch {hist.best_epoch}, {elapsed:.0f}s")
    assert loss < 0.1 * math.log(V)
    assert elapsed < 300


@pytest.mark.slow
@criterion(8, "distilled student beats the hard-only student in >=3 of 5 seeds")
def test_distillation_gain(record_property):
    t0 = time.perf_counter()
    data = split_leave_one_out(markov_sequences(5000, 200, min_len=6, max_len=12, seed=11), n=10, seed=5)
    V = data.vocab_size
    tcfg = ModelConfig(num_layers=4, hidden_dim=128, num_heads=4, vocab_size=V, max_len=10, dropout_rate=0.1)
    teacher, _ = train((init_params(tcfg, 1), tcfg), data,
                       TrainConfig(learning_rate=1e-3, batch_size=64, max_epochs=12, patience=3, rho=0.55, seed=1))
    scfg = ModelConfig(num_layers=2, hidden_dim=32, num_heads=4, vocab_size=V, max_len=10, dropout_rate=0.1)
    wins, pairs = 0, []
    for seed in SEEDS:
        scores = []
        for alpha in (0.5, 1.0):
            dcfg = DistillConfig(alpha=alpha, temperature=1.5, rho=0.35, learning_rate=2e-3, batch_size=64,
                                 max_epochs=12, patience=3, seed=seed)
            _, hist = distill((teacher, tcfg), (init_params(scfg, 100 + seed), scfg), data, dcfg)
            scores.append(hist.best_metric)
        pairs.append(f"{scores[0]:.3f}/{scores[1]:.3f}")
        wins += scores[0] >= scores[1]
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{wins}/5 wins (kd/hard NDCG@10: {' '.join(pairs)}), {elapsed:.0f}s")
    assert wins >= 3
    assert elapsed < 1800


@pytest.mark.slow
@criterion(9, "metric std over 3 mapping seeds below 0.05")
def test_mapping_stability(record_property):
    seqs = markov_sequences(1000, 100, min_len=6, max_len=12, seed=21)
    cfg = PipelineConfig(
        model=ModelConfig(num_layers=2, hidden_dim=32, num_heads=4, dropout_rate=0.1),
        train=TrainConfig(learning_rate=2e-3, batch_size=64, max_epochs=8, patience=3, rho=0.35),
    )
    grid = stability_experiment(seqs, [1, 2, 3], cfg, n=10)
    record_property("detail", ", ".join(f"{k} {v:.4f}" for k, v in grid.std.items()))
    assert all(v < 0.05 for v in grid.std.values())


@criterion(10, "bit-exact checkpoints and byte-deterministic prepare")
def test_determinism(tmp_path, record_property):
    config = ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, vocab_size=30, max_len=8,
                         tie_output_to_embedding=False)
    params = init_params(config, 4)
    for t in params.values():
        t.data += np.random.default_rng(1).normal(size=t.shape)
    save_checkpoint(params, config, tmp_path / "a.ckpt")
    loaded, loaded_cfg = load_checkpoint(tmp_path / "a.ckpt")
    assert loaded_cfg == config and list(loaded) == list(params)
    for name in params:
        assert loaded[name].data.tobytes() == params[name].data.tobytes()
    save_checkpoint(loaded, loaded_cfg, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    seqs = markov_sequences(60, 25, 5, 12, seed=4)
    lines = [f"{u}::{item}::5::{1000 + t}" for u, items in seqs.items() for t, item in enumerate(items)]
    (tmp_path / "ratings.dat").write_text("\n".join(lines) + "\n")
    blobs = []
    for name, seed in (("x", 3), ("y", 3), ("z", 4)):
        save_dataset(prepare_dataset(tmp_path / "ratings.dat", "ml-1m", 5, seed, 10), tmp_path / name)
        blobs.append((tmp_path / name).read_bytes())
    assert blobs[0] == blobs[1] and blobs[0] != blobs[2]
    record_property("detail", f"checkpoint {len((tmp_path / 'a.ckpt').read_bytes())} bytes, dataset {len(blobs[0])} bytes")


@pytest.mark.slow
@criterion(11, "student p50 below teacher p50; /recommend equals the ranking prefix")
def test_serving(tmp_path, record_property):
    data = split_leave_one_out(markov_sequences(300, 200, 6, 40, seed=9), n=50, seed=2)
    tm = data.token_map
    save_token_map(tm, tmp_path / "map.json")
    bundles = {}
    for label, (L, d, h) in (("teacher", (12, 256, 4)), ("student", (2, 64, 2))):
        config = ModelConfig(num_layers=L, hidden_dim=d, num_heads=h, vocab_size=data.vocab_size, max_len=50)
        save_checkpoint(init_params(config, 0), config, tmp_path / f"{label}.ckpt")
        bundles[label] = ServingBundle.load(tmp_path / f"{label}.ckpt", tmp_path / "map.json", label)

    rng = np.random.default_rng(0)
    histories = [[tm.items[i] for i in rng.integers(0, tm.num_items, size=rng.integers(1, 60))]
                 for _ in range(100)]
    for label, b in bundles.items():
        score = model_score_fn(*load_checkpoint(tmp_path / f"{label}.ckpt"))
        with TestClient(create_app(b)) as client:
            for history in histories:
                tokens = tm.encode(history)[-49:]
                query = np.array([[0] * (49 - len(tokens)) + tokens + [MASK]])
                expected = tm.decode(ranked_candidates(score(query)[0])[:10])
                r = client.post("/recommend", json={"items": history, "k": 10})
                assert r.status_code == 200 and r.json()["items"] == expected

    result = bench(bundles["teacher"], bundles["student"], histories, warmup=10)
    record_property("detail", f"p50 teacher {result.teacher.p50_us:.0f}us, student {result.student.p50_us:.0f}us, "
                              f"ratio {result.ratio:.3f}")
    assert result.student.p50_us < result.teacher.p50_us


@pytest.mark.slow
@criterion(12, "alpha endpoints bit-match; rho and T sweeps emit well-formed grids")
def test_sweep_consistency(record_property):
    data = split_leave_one_out(markov_sequences(120, 30, 5, 10, seed=12), n=8, seed=0)
    small = ModelConfig(num_layers=1, hidden_dim=16, num_heads=2, dropout_rate=0.1)
    fast = TrainConfig(learning_rate=3e-3, batch_size=32, max_epochs=2, patience=2)
    tcfg = ModelConfig(num_layers=2, hidden_dim=32, num_heads=2, vocab_size=data.vocab_size, max_len=8)
    teacher = (train((init_params(tcfg, 0), tcfg), data, fast)[0], tcfg)

    def pipeline(**kw):
        return PipelineConfig(model=small, train=fast, stage="distill",
                              distill=DistillConfig(learning_rate=3e-3, batch_size=32, max_epochs=2, **kw))

    grid = sweep("alpha", [0.0, 0.5, 1.0], pipeline(), data, teacher)
    for cell, alpha in zip((grid.cells[0], grid.cells[2]), (0.0, 1.0)):
        direct = run_pipeline(data, pipeline(alpha=alpha), teacher)
        assert cell.metrics == direct.report.metrics
        assert cell.metrics == run_pipeline(data, apply_axis(pipeline(), "alpha", alpha), teacher).report.metrics

    rhos = [round(0.15 + 0.1 * i, 2) for i in range(8)]
    temps = [round(1.1 + 0.1 * i, 1) for i in range(7)]
    grids = [sweep("rho", rhos, pipeline(), data, teacher), sweep("temperature", temps, pipeline(), data, teacher)]
    for g, values in zip(grids, (rhos, temps)):
        obj = g.to_json()
        assert obj["values"] == values and len(obj["cells"]) == len(values)
        assert set(obj["mean"]) == set(obj["std"]) == {"HR@5", "NDCG@5", "HR@10", "NDCG@10"}
        for cell in obj["cells"]:
            assert all(0.0 <= v <= 1.0 for v in cell["metrics"].values())
    record_property("detail", f"alpha endpoints identical; rho {rhos[0]}..{rhos[-1]}, T {temps[0]}..{temps[-1]}")
