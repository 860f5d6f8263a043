import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ruda.adapt import (AdaptationConfig, ConfigError, adaptation_step, converged, init_centroids,
                        init_state, lr_sweep, pretrain_source, run_adaptation)
from ruda.data import DomainDataset, make_synthetic_pair, sample_minibatch, sample_rows
from ruda.nets import (ClassifierSpec, DiscriminatorSpec, DivergenceError, EncoderSpec,
                       build_models)
from ruda.evaluation import evaluate

ORDER_FULL = ["dec:theta_Et", "dec:Z_c", "dis:Z_c", "adv:theta_D", "enc:theta_Et"]


def small_bundle(k=3, f=4, seed=0, hidden=(16, 16), disc=(32, 32)):
    return build_models(EncoderSpec("mlp", (2,), f, hidden), ClassifierSpec(f, k),
                        DiscriminatorSpec(f, disc), seed=seed)


@pytest.fixture(scope="module")
def toy():
    src, tgt = make_synthetic_pair(3, 40, 2, shift=(1.0, 0.0), rotation_angle=0.2, noise_sd=0.3, seed=1)
    bundle = pretrain_source(small_bundle(), src, epochs=5, lr=1e-2, seed=0)
    return bundle, src, tgt


def cfg(**kw):
    base = dict(gamma_adv=1e-3, gamma_enc=1e-3, gamma_dec=1e-3, batch_size=16, max_iters=20,
                i_adv=2, eval_every=10)
    base.update(kw)
    return AdaptationConfig(**base)


def step_once(state, src, tgt, c):
    tb = sample_minibatch(tgt.unlabeled(), src.unlabeled(), c.batch_size, c.mix_ratio, state.rng)
    sb = sample_rows(src.unlabeled(), c.batch_size, state.rng)
    return adaptation_step(state, tb, sb, c)


class TestConfig:
    def test_gamma_dis_default(self):
        assert AdaptationConfig(gamma_dec=3e-4).gamma_dis == pytest.approx(6e-4)
        assert AdaptationConfig(gamma_dec=3e-4, gamma_dis=1e-2).gamma_dis == 1e-2

    def test_partial_defaults(self):
        c = AdaptationConfig(mode="partial")
        assert c.i_adv == 0 and c.mix_ratio == 0.5
        assert AdaptationConfig().mix_ratio == 0.0

    def test_partial_without_mixing_rejected(self):
        with pytest.raises(ConfigError) as exc:
            AdaptationConfig(mode="partial", mix_ratio=0.0)
        assert exc.value.key == "mix_ratio"

    @pytest.mark.parametrize("key,value", [
        ("gamma_adv", 0.0), ("gamma_enc", -1e-3), ("gamma_dec", float("nan")),
        ("batch_size", 0), ("mode", "weird"), ("ablation", "none"), ("optimizer", "rmsprop"),
        ("mix_ratio", 0.3), ("i_adv", -1),
    ])
    def test_invalid_values_name_key(self, key, value):
        with pytest.raises(ConfigError) as exc:
            AdaptationConfig(**{key: value})
        assert exc.value.key == key

    def test_warmup_must_precede_end(self):
        with pytest.raises(ConfigError, match="i_adv"):
            AdaptationConfig(i_adv=10, max_iters=10)

    def test_adda_mix_needs_partial(self):
        with pytest.raises(ConfigError):
            AdaptationConfig(ablation="adda_mix")
        AdaptationConfig(ablation="adda_mix", mode="partial")


class TestPretrain:
    def test_separable_blobs(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal((-3, 0), 0.5, (100, 2)), rng.normal((3, 0), 0.5, (100, 2))])
        y = np.repeat([0, 1], 100)
        ds = DomainDataset(x.astype(np.float32), y, 2)
        b = pretrain_source(small_bundle(k=2), ds, epochs=20, lr=1e-3, seed=0)
        assert evaluate(b, ds, which="source").overall_acc >= 0.99

    def test_zero_epochs_is_noop(self, toy):
        _, src, _ = toy
        b0 = small_bundle()
        b = pretrain_source(b0, src, epochs=0)
        assert b.checksums() == b0.checksums()
        assert {"source_encoder", "classifier"} <= b.frozen
        assert not any(p.requires_grad for p in b.classifier.parameters())

    def test_target_resynced(self, toy):
        b, _, _ = toy
        assert b.checksum("target_encoder") == b.checksum("source_encoder")

    def test_unlabeled_rejected(self, toy):
        _, src, _ = toy
        with pytest.raises(ValueError):
            pretrain_source(small_bundle(), src.unlabeled(), epochs=1)

    def test_divergence(self, toy):
        _, src, _ = toy
        bad = DomainDataset(np.full((8, 2), np.inf, np.float32), np.zeros(8, np.int64), 3)
        with pytest.raises((DivergenceError, ValueError)):
            pretrain_source(small_bundle(), bad, epochs=1)


class TestInitCentroids:
    def _identity_bundle(self):
        # 2-D features equal to the inputs; class 1 wins on the diagonal
        b = small_bundle(k=2, f=2)
        with torch.no_grad():
            for name in ("source_encoder", "target_encoder"):
                lin = torch.nn.Linear(2, 2, bias=False)
                lin.weight.copy_(torch.eye(2))
                setattr(b, name, lin)
            b.classifier.weight.copy_(torch.tensor([[-1.0, -1.0], [1.0, 1.0]]))
            b.classifier.bias.copy_(torch.tensor([0.5, 0.0]))
        return b

    def test_mean_of_predicted(self):
        b = self._identity_bundle()
        tgt = DomainDataset(np.array([[0, 0], [2, 2], [-5, -5]], np.float32), None, 2)
        src = DomainDataset(np.array([[-1, -1], [3, 3]], np.float32), np.array([0, 1]), 2)
        z = init_centroids(b, tgt, src, "balanced")
        # (0,0) scores 0.5 vs 0 -> class 0; (2,2) -> class 1; (-5,-5) -> class 0
        assert z[1].tolist() == [2.0, 2.0]
        assert z[0].tolist() == [-2.5, -2.5]

    def test_two_points_average(self):
        b = self._identity_bundle()
        with torch.no_grad():
            b.classifier.bias.zero_()
            b.classifier.bias[1] = 1.0
        tgt = DomainDataset(np.array([[0, 0], [2, 2]], np.float32), None, 2)
        src = DomainDataset(np.array([[-1, -1], [3, 3]], np.float32), np.array([0, 1]), 2)
        z = init_centroids(b, tgt, src, "balanced")
        assert z[1].tolist() == [1.0, 1.0]

    def test_empty_class_falls_back_to_source_mean(self):
        b = self._identity_bundle()
        tgt = DomainDataset(np.array([[2, 2], [4, 4]], np.float32), None, 2)
        src = DomainDataset(np.array([[-1, -1], [-3, -1], [3, 3]], np.float32), np.array([0, 0, 1]), 2)
        z = init_centroids(b, tgt, src, "balanced")
        assert z[0].tolist() == [-2.0, -1.0]

    def test_partial_ignores_target(self):
        b = self._identity_bundle()
        src = DomainDataset(np.array([[-1, -1], [-3, -1], [3, 3]], np.float32), np.array([0, 0, 1]), 2)
        t1 = DomainDataset(np.array([[2, 2]], np.float32), None, 2)
        t2 = DomainDataset(np.array([[-9, 7], [1, 5]], np.float32), None, 2)
        z1 = init_centroids(b, t1, src, "partial")
        z2 = init_centroids(b, t2, src, "partial")
        assert torch.equal(z1, z2)
        assert z1.tolist() == [[-2.0, -1.0], [3.0, 3.0]]

    def test_global_fallback_is_deterministic(self):
        b = self._identity_bundle()
        src = DomainDataset(np.array([[3, 3]], np.float32), np.array([1]), 2)
        tgt = DomainDataset(np.array([[2, 2]], np.float32), None, 2)
        z = init_centroids(b, tgt, src, "balanced")
        assert torch.equal(z, init_centroids(b, tgt, src, "balanced"))
        assert torch.allclose(z[0], torch.tensor([2.5, 2.5]), atol=1e-2)
        assert not torch.equal(z[0], torch.tensor([2.5, 2.5]))

    def test_row_count_is_source_classes(self, toy):
        b, src, tgt = toy
        z = init_centroids(b, tgt.take(np.arange(5)), src, "balanced")
        assert z.shape == (3, b.feature_dim)


class TestStep:
    @pytest.mark.parametrize("ablation,expected", [
        ("full", ORDER_FULL),
        ("no_dis", ["dec:theta_Et", "dec:Z_c", "adv:theta_D", "enc:theta_Et"]),
        ("adda_only", ["adv:theta_D", "enc:theta_Et"]),
    ])
    def test_update_order(self, toy, ablation, expected):
        b, src, tgt = toy
        c = cfg(ablation=ablation, i_adv=0)
        state = init_state(b, tgt, src, c)
        state.iter = 1
        step_once(state, src, tgt, c)
        assert state.last_updates == expected

    def test_warmup_gating(self, toy):
        b, src, tgt = toy
        c = cfg(i_adv=3)
        state = init_state(b, tgt, src, c)
        seen = []
        for _ in range(6):
            it = state.iter
            step_once(state, src, tgt, c)
            seen.append((it, state.last_updates))
        for it, touched in seen:
            assert touched == (ORDER_FULL if it > 3 else ORDER_FULL[3:])
        assert math.isnan(state.loss_traces["L_dec"][3])
        assert not math.isnan(state.loss_traces["L_dec"][4])

    def test_clustering_step_is_plain_sgd(self, toy):
        # the encoder moves by exactly -gamma_dec * grad(L_dec) before the adversarial steps
        b, src, tgt = toy
        c = cfg(i_adv=0, ablation="no_dis", optimizer="sgd", gamma_adv=1e-12, gamma_enc=1e-12)
        state = init_state(b, tgt, src, c)
        state.iter = 1
        tb = sample_minibatch(tgt.unlabeled(), src.unlabeled(), 16, 0.0, np.random.default_rng(3))
        sb = sample_rows(src.unlabeled(), 16, np.random.default_rng(4))
        from ruda.losses import auxiliary_dist, clustering_loss, soft_assign
        from ruda.nets import encode
        z0 = state.centroids.clone().requires_grad_(True)
        params = [p for p in state.bundle.target_encoder.parameters()]
        before = [p.detach().clone() for p in params]
        q = soft_assign(encode(state.bundle, "target", torch.from_numpy(np.asarray(tb.inputs))), z0)
        grads = torch.autograd.grad(clustering_loss(auxiliary_dist(q), q), [*params, z0])
        adaptation_step(state, tb, sb, c)
        assert torch.allclose(state.centroids, z0.detach() - 1e-3 * grads[-1], atol=1e-7)
        for p, p0, g in zip(params, before, grads):
            assert torch.allclose(p.detach(), p0 - 1e-3 * g, atol=1e-6)

    def test_divergence_names_loss(self, toy):
        b, src, tgt = toy
        c = cfg(i_adv=0)
        state = init_state(b, tgt, src, c)
        state.iter = 1
        state.centroids = torch.full_like(state.centroids, float("nan"))
        with pytest.raises(DivergenceError, match="L_dec"):
            step_once(state, src, tgt, c)

    @settings(max_examples=10, deadline=None)
    @given(st.sampled_from(["full", "no_dis", "adda_only"]), st.integers(0, 4), st.integers(0, 1000))
    def test_order_property(self, toy, ablation, i_adv, seed):
        b, src, tgt = toy
        c = cfg(ablation=ablation, i_adv=i_adv, seed=seed)
        state = init_state(b, tgt, src, c)
        for _ in range(i_adv + 2):
            it = state.iter
            step_once(state, src, tgt, c)
            expected = [u for u in ORDER_FULL
                        if u.startswith(("adv", "enc"))
                        or (it > i_adv and ablation != "adda_only" and (u != "dis:Z_c" or ablation == "full"))]
            assert state.last_updates == expected


class TestRun:
    def test_frozen_checksums_over_500_iterations(self, toy):
        b, src, tgt = toy
        c = cfg(max_iters=500, i_adv=50, eval_every=250)
        before = b.checksums()
        state, _ = run_adaptation(b, tgt, src, c)
        after = state.bundle.checksums()
        assert after["source_encoder"] == before["source_encoder"]
        assert after["classifier"] == before["classifier"]
        assert after["target_encoder"] != before["target_encoder"]
        assert b.checksums() == before  # input bundle untouched
        for name in ("L_adv", "L_enc", "L_dec", "L_dis"):
            vals = [v for v in state.loss_traces[name] if not math.isnan(v)]
            assert vals and all(math.isfinite(v) for v in vals)

    def test_adda_only_centroids_fixed(self, toy):
        b, src, tgt = toy
        c = cfg(ablation="adda_only", max_iters=30)
        init = init_centroids(b, tgt, src, "balanced")
        state, _ = run_adaptation(b, tgt, src, c)
        assert torch.equal(state.centroids, init)

    def test_deterministic(self, toy):
        b, src, tgt = toy
        c = cfg(max_iters=40)
        s1, r1 = run_adaptation(b, tgt, src, c)
        s2, r2 = run_adaptation(b, tgt, src, c)
        assert s1.bundle.checksums() == s2.bundle.checksums()
        assert torch.equal(s1.centroids, s2.centroids)
        assert r1.overall_acc == r2.overall_acc

    def test_partial_runs(self, toy):
        b, src, tgt = toy
        part = tgt.take(np.flatnonzero(tgt.labels < 2))
        state, rep = run_adaptation(b, part, src, cfg(mode="partial", i_adv=None, max_iters=10))
        assert state.centroids.shape[0] == 3
        assert rep.per_class_acc[2] is None

    def test_outputs(self, toy, tmp_path):
        b, src, tgt = toy
        records = []
        run_adaptation(b, tgt, src, cfg(max_iters=20, eval_every=10), tmp_path, on_eval=records.append)
        assert [r["iter"] for r in records] == [0, 10, 20]
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 3
        with open(tmp_path / "losses.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iter", "L_adv", "L_enc", "L_dec", "L_dis"]
        assert len(rows) == 21
        assert (tmp_path / "checkpoint.pt").exists() and (tmp_path / "metrics.json").exists()

    def test_early_stop(self, toy):
        b, src, tgt = toy
        c = cfg(max_iters=400, eval_every=10, early_stop=True, churn_window=50, churn_tol=0.5,
                gamma_enc=1e-6, gamma_dec=1e-6)
        state, _ = run_adaptation(b, tgt, src, c)
        assert state.iter < 400
        assert converged(state, c)

    def test_identity_pair_sanity(self):
        src, tgt = make_synthetic_pair(3, 60, 2, shift=(0.0, 0.0), rotation_angle=0.0, noise_sd=0.4, seed=2)
        b = pretrain_source(small_bundle(), src, epochs=10, lr=1e-2, seed=0)
        base = evaluate(b, tgt).overall_acc
        _, rep = run_adaptation(b, tgt, src, cfg(max_iters=200, i_adv=50, gamma_enc=1e-4, gamma_dec=1e-4))
        assert rep.overall_acc >= base - 0.02


class TestSweep:
    def test_singleton_equals_plain_run(self, toy):
        b, src, tgt = toy
        c = cfg(max_iters=20)
        rows = lr_sweep(b, tgt, src, c, [5e-4])
        _, rep = run_adaptation(b, tgt, src, cfg(max_iters=20, gamma_dec=5e-4))
        assert len(rows) == 1
        assert rows[0]["overall_acc"] == rep.overall_acc
        assert rows[0]["gamma_dis"] == pytest.approx(1e-3)

    def test_duplicate_cells_identical(self, toy, tmp_path):
        b, src, tgt = toy
        rows = lr_sweep(b, tgt, src, cfg(max_iters=20), [1e-3, 1e-3], tmp_path / "s.csv")
        assert rows[0]["overall_acc"] == rows[1]["overall_acc"]
        with open(tmp_path / "s.csv") as fh:
            table = list(csv.DictReader(fh))
        assert [r["status"] for r in table] == ["ok", "ok"]

    def test_failure_recorded(self, toy):
        b, src, tgt = toy
        rows = lr_sweep(b, tgt, src, cfg(max_iters=20, i_adv=0), [1e-4, 1e38])
        assert rows[0]["status"] == "ok"
        assert rows[1]["status"].startswith("error")
        assert math.isnan(rows[1]["overall_acc"])

    @pytest.mark.parametrize("grid", [[], [0.0], [1e-3, -1e-4]])
    def test_bad_grid(self, toy, grid):
        b, src, tgt = toy
        with pytest.raises(ValueError):
            lr_sweep(b, tgt, src, cfg(), grid)
