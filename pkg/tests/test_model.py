import numpy as np
import pytest

from latentflow.errors import ConfigError
from latentflow.flow import LossSpec, joint_loss
from latentflow.model import (
    DenoiserConfig,
    ema_update,
    forward,
    init_params,
    loss_and_grad,
    param_count,
    parameter_shapes,
)
from latentflow.rng import stream

# under 5k parameters so finite differences stay fast at 64-bit
TINY = DenoiserConfig(
    depth=3, hidden_dim=8, heads=2, patch=2, bottleneck_dim=4, expert_layers=2,
    num_classes=3, tokens_per_side=2, modality_dims={"pixel": 12, "latent": 6},
    fourier_freqs=8,
)


def randomized_params(cfg, seed=42, scale=0.05, dtype=np.float64):
    """Params with every tensor non-zero so gradients flow on all paths."""
    rng = stream(seed)
    return {k: (rng.standard_normal(v.shape) * scale).astype(dtype)
            for k, v in init_params(cfg, seed=0, dtype=dtype).items()}


def make_batch(cfg, seed=3, batch=3, active=None):
    rng = stream(seed)
    x = {m: rng.standard_normal((batch, cfg.tokens_per_side, cfg.tokens_per_side, d))
         for m, d in cfg.modality_dims.items()}
    eps = {m: rng.standard_normal(x[m].shape) for m in x}
    times = {m: rng.uniform(0.05, 0.95, batch) for m in x}
    z = {m: times[m].reshape(-1, 1, 1, 1) * x[m]
         + (1 - times[m].reshape(-1, 1, 1, 1)) * eps[m] for m in x}
    labels = rng.integers(-1, cfg.num_classes, size=batch)
    return dict(z=z, x=x, times=times, labels=labels, active=active)


class TestConfig:
    def test_param_count_pure_function(self):
        assert param_count(TINY) == sum(
            int(np.prod(s)) for s in parameter_shapes(TINY).values()
        )
        assert param_count(TINY) < 5000

    def test_experts_do_not_change_count(self):
        with_experts = TINY
        without = DenoiserConfig(
            depth=3, hidden_dim=8, heads=2, patch=2, bottleneck_dim=4,
            expert_layers=0, num_classes=3, tokens_per_side=2,
            modality_dims={"pixel": 12, "latent": 6}, fourier_freqs=8,
        )
        assert param_count(with_experts) == param_count(without)

    def test_rejects_bad_configs(self):
        with pytest.raises(ConfigError):
            DenoiserConfig(hidden_dim=10, heads=4)
        with pytest.raises(ConfigError):
            DenoiserConfig(expert_layers=3)
        with pytest.raises(ConfigError):
            DenoiserConfig(depth=2, expert_layers=2)

    def test_block_roles_split(self):
        shared, experts = TINY.block_roles()
        assert shared == [0]
        assert experts == {"latent": [1], "pixel": [2]}


class TestForward:
    def test_deterministic(self):
        params = randomized_params(TINY)
        batch = make_batch(TINY)
        a = forward(params, TINY, batch["z"], batch["times"], batch["labels"])
        b = forward(params, TINY, batch["z"], batch["times"], batch["labels"])
        for m in a:
            assert np.array_equal(a[m], b[m])

    def test_output_shapes(self):
        params = randomized_params(TINY)
        batch = make_batch(TINY, batch=5)
        preds = forward(params, TINY, batch["z"], batch["times"], batch["labels"])
        for m, d in TINY.modality_dims.items():
            assert preds[m].shape == (5, 2, 2, d)

    def test_adaln_zero_blocks_are_identity_at_init(self):
        # with zero modulation the gates are zero, so every block output
        # equals its input and the prediction is exactly the zero head bias
        params = init_params(TINY, seed=0, dtype=np.float64)
        batch = make_batch(TINY)
        preds = forward(params, TINY, batch["z"], batch["times"], batch["labels"])
        for m in preds:
            assert np.all(preds[m] == 0.0)

    def test_class_row_permutation_permutes_outputs(self):
        params = randomized_params(TINY)
        permuted = {k: v.copy() for k, v in params.items()}
        permuted["class_embed"][[0, 1]] = permuted["class_embed"][[1, 0]]
        batch = make_batch(TINY)
        lab0 = np.zeros(3, dtype=int)
        lab1 = np.ones(3, dtype=int)
        a = forward(params, TINY, batch["z"], batch["times"], lab1)
        b = forward(permuted, TINY, batch["z"], batch["times"], lab0)
        for m in a:
            assert np.allclose(a[m], b[m], atol=1e-12)

    def test_null_class_uses_last_row(self):
        params = randomized_params(TINY)
        batch = make_batch(TINY)
        null_lab = np.full(3, -1)
        explicit = np.full(3, TINY.num_classes)  # same row, addressed directly
        a = forward(params, TINY, batch["z"], batch["times"], null_lab)
        params["class_embed"][TINY.num_classes] += 1.0
        b = forward(params, TINY, batch["z"], batch["times"], null_lab)
        assert not np.allclose(a["pixel"], b["pixel"])
        with pytest.raises(ValueError):
            forward(params, TINY, batch["z"], batch["times"], explicit)

    def test_misaligned_grids_raise(self):
        params = randomized_params(TINY)
        batch = make_batch(TINY)
        bad = {m: v.copy() for m, v in batch["z"].items()}
        bad["latent"] = bad["latent"][:, :1]
        with pytest.raises(ValueError):
            forward(params, TINY, bad, batch["times"], batch["labels"])

    def test_scalar_times_accepted(self):
        params = randomized_params(TINY)
        batch = make_batch(TINY)
        preds = forward(params, TINY, batch["z"], {"pixel": 0.5, "latent": 0.25},
                        batch["labels"])
        assert preds["pixel"].shape[0] == 3


class TestGradients:
    def setup_method(self):
        self.params = randomized_params(TINY)
        self.spec = LossSpec(weights={"pixel": 1.0, "latent": 1 / 3}, t_clip=0.05)
        active = {
            "pixel": np.array([True, True, False]),
            "latent": np.array([True, False, True]),
        }
        self.batch = make_batch(TINY, active=active)

    def loss_only(self, params):
        preds = forward(params, TINY, self.batch["z"], self.batch["times"],
                        self.batch["labels"])
        targets = {m: (self.batch["x"][m], self.batch["times"][m]) for m in preds}
        return joint_loss(preds, targets, self.spec, self.batch["active"])[0]

    def test_matches_central_differences(self):
        total, _, grads = loss_and_grad(self.params, TINY, self.batch, self.spec)
        assert np.isfinite(total)
        rng = np.random.default_rng(11)
        names = list(self.params)
        # force coverage of both heads and both time embeddings
        forced = ["head.pixel.out.w", "head.latent.out.w",
                  "time.pixel.fc1.w", "time.latent.fc1.w"]
        h = 1e-5
        for trial in range(20):
            name = forced[trial] if trial < len(forced) else names[rng.integers(len(names))]
            idx = tuple(rng.integers(s) for s in self.params[name].shape)
            orig = self.params[name][idx]
            self.params[name][idx] = orig + h
            lp = self.loss_only(self.params)
            self.params[name][idx] = orig - h
            lm = self.loss_only(self.params)
            self.params[name][idx] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom < 1e-3, (name, idx, fd, an)

    def test_masked_modality_head_gets_zero_grad(self):
        batch = make_batch(
            TINY,
            active={"pixel": np.ones(3, bool), "latent": np.zeros(3, bool)},
        )
        _, comps, grads = loss_and_grad(self.params, TINY, batch, self.spec)
        assert comps["latent"] == 0.0
        for name in grads:
            if name.startswith("head.latent."):
                assert np.all(grads[name] == 0.0), name
        # the latent expert block is also a dead path on a fully masked batch
        _, experts = TINY.block_roles()
        for i in experts["latent"]:
            assert np.all(grads[f"block{i}.attn.qkv.w"] == 0.0)
        assert np.any(grads["head.pixel.out.w"] != 0.0)

    def test_weight_scaling_scales_isolated_head_grads(self):
        spec2 = LossSpec(weights={"pixel": 1.0, "latent": 2 / 3}, t_clip=0.05)
        _, _, g1 = loss_and_grad(self.params, TINY, self.batch, self.spec)
        _, _, g2 = loss_and_grad(self.params, TINY, self.batch, spec2)
        for name in ("head.latent.out.w", "head.latent.adaln.w"):
            assert np.allclose(g2[name], 2.0 * g1[name], rtol=1e-12)
        assert np.allclose(g2["head.pixel.out.w"], g1["head.pixel.out.w"], rtol=1e-12)


class TestEma:
    def test_decay_zero_copies(self):
        params = randomized_params(TINY, seed=1)
        shadow = {k: np.zeros_like(v) for k, v in params.items()}
        ema_update(shadow, params, 0.0)
        for k in params:
            assert np.array_equal(shadow[k], params[k])

    def test_geometric_convergence(self):
        params = {"w": np.array([1.0])}
        shadow = {"w": np.array([0.0])}
        decay = 0.9
        for n in range(1, 30):
            ema_update(shadow, params, decay)
            assert shadow["w"][0] == pytest.approx(1.0 - decay**n, rel=1e-12)

    def test_rejects_bad_decay(self):
        params = {"w": np.zeros(1)}
        with pytest.raises(ConfigError):
            ema_update(params, params, 1.0)


def test_fourier_features_shape_and_range():
    from latentflow.model import fourier_features

    ff = fourier_features(np.array([0.0, 0.5, 1.0]), 16)
    assert ff.shape == (3, 32)
    assert np.all(np.abs(ff) <= 1.0)
    assert np.allclose(ff[0, :16], 1.0)  # cos(0)
    assert np.allclose(ff[0, 16:], 0.0)  # sin(0)
