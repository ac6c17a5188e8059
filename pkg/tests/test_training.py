"""Loss definitions, optimizer behavior and the training loop contracts."""

import math

import numpy as np
import pytest

from sfanet.autograd import Parameter, Tensor, backward
from sfanet.data import AugmentConfig, load_dataset
from sfanet.model import ModelConfig, build_model
from sfanet.synth import generate_synthetic_dataset
from sfanet.training import (
    TrainConfig,
    TrainState,
    adam_step,
    attention_loss,
    combined_loss,
    density_loss,
    train,
)


def small_model(dtype="float64", **overrides):
    cfg = dict(width_multiplier=0.125, init_seed=3, dtype=dtype)
    cfg.update(overrides)
    return build_model(ModelConfig(**cfg))


def forward_losses(model, images, dtarget, atarget, alpha=0.1):
    out = model.forward(images, training=True)
    dl = density_loss(out.density, dtarget)
    al = attention_loss(out.attention_logits, atarget) if out.attention_logits is not None else None
    return dl, al, combined_loss(dl, al, alpha)


def grads_of(model, loss):
    model.zero_grad()
    backward(loss)
    return {p.name: (p.grad.copy() if p.grad is not None else None)
            for p in model.parameters()}


class TestDensityLoss:
    def test_zero_when_equal(self):
        x = Tensor(np.random.default_rng(0).random((2, 1, 4, 4)))
        assert density_loss(x, Tensor(x.data.copy())).item() == 0.0

    def test_two_pixel_fixture(self):
        """Residuals of 1 and 2 in one image: loss = 1^2 + 2^2 = 5."""
        pred = np.zeros((1, 1, 3, 3))
        target = np.zeros((1, 1, 3, 3))
        pred[0, 0, 0, 0] = 1.0
        pred[0, 0, 2, 1] = 2.0
        assert density_loss(Tensor(pred), Tensor(target)).item() == 5.0

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        pred = rng.standard_normal((3, 1, 5, 7))
        target = rng.standard_normal((3, 1, 5, 7))
        got = density_loss(Tensor(pred), Tensor(target)).item()
        acc = 0.0
        for n in range(3):
            for i in range(5):
                for j in range(7):
                    acc += (pred[n, 0, i, j] - target[n, 0, i, j]) ** 2
        assert abs(got - acc / 3) < 1e-10

    def test_pixel_mean_reduction(self):
        rng = np.random.default_rng(2)
        pred = rng.standard_normal((2, 1, 4, 4))
        target = rng.standard_normal((2, 1, 4, 4))
        got = density_loss(Tensor(pred), Tensor(target), reduction="pixel_mean").item()
        assert abs(got - ((pred - target) ** 2).mean()) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            density_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2))))


class TestAttentionLoss:
    def test_confident_correct_prediction_drives_loss_to_zero(self):
        target = Tensor(np.ones((1, 1, 4, 4)))
        losses = [attention_loss(Tensor(np.full((1, 1, 4, 4), z)), target).item()
                  for z in (0.0, 2.0, 8.0, 30.0)]
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-10

    def test_uniform_half_probability_gives_hw_ln2(self):
        """Logits 0 mean p = 0.5 everywhere: per-image loss is h*w*ln 2."""
        rng = np.random.default_rng(3)
        h, w = 6, 9
        target = (rng.random((1, 1, h, w)) < 0.4).astype(np.float64)
        loss = attention_loss(Tensor(np.zeros((1, 1, h, w))), Tensor(target)).item()
        assert abs(loss - h * w * math.log(2)) < 1e-9

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(4)
        z = rng.uniform(-5, 5, size=(2, 1, 4, 6))
        t = rng.integers(0, 2, size=(2, 1, 4, 6)).astype(np.float64)
        got = attention_loss(Tensor(z), Tensor(t)).item()
        acc = 0.0
        for n in range(2):
            for i in range(4):
                for j in range(6):
                    p = 1.0 / (1.0 + math.exp(-z[n, 0, i, j]))
                    acc -= t[n, 0, i, j] * math.log(p) + (1 - t[n, 0, i, j]) * math.log(1 - p)
        assert abs(got - acc / 2) < 1e-8

    def test_non_binary_target_rejected(self):
        with pytest.raises(ValueError):
            attention_loss(Tensor(np.zeros((1, 1, 2, 2))),
                           Tensor(np.full((1, 1, 2, 2), 0.5)))


class TestCombinedLoss:
    def test_fixture(self):
        assert combined_loss(Tensor(2.0), Tensor(3.0), 0.1).item() == pytest.approx(2.3)

    def test_alpha_zero_returns_density_term(self):
        dl = Tensor(4.0)
        assert combined_loss(dl, Tensor(100.0), 0.0) is dl
        assert combined_loss(dl, None, 0.1) is dl

    def test_gradient_linearity(self):
        """grad(L) == grad(L_den) + alpha*grad(L_att), by three backwards."""
        rng = np.random.default_rng(5)
        model = small_model()
        images = Tensor(rng.standard_normal((1, 3, 32, 32)))
        dt = Tensor(np.abs(rng.standard_normal((1, 1, 16, 16))) * 0.1)
        at = Tensor(rng.integers(0, 2, (1, 1, 16, 16)).astype(np.float64))

        dl, al, L = forward_losses(model, images, dt, at)
        g_total = grads_of(model, L)
        dl, al, _ = forward_losses(model, images, dt, at)
        g_den = grads_of(model, dl)
        dl, al, _ = forward_losses(model, images, dt, at)
        g_att = grads_of(model, al)

        for name, g in g_total.items():
            a = g_den[name] if g_den[name] is not None else 0.0
            b = g_att[name] if g_att[name] is not None else 0.0
            expected = a + 0.1 * b
            denom = max(np.abs(expected).max(), np.abs(g).max(), 1e-12)
            assert np.abs(g - expected).max() / denom < 1e-8, name

    def test_attention_loss_reaches_no_density_decoder_parameters(self):
        """The attention objective depends on the backbone and the attention
        path only; density-path gradients are absent."""
        rng = np.random.default_rng(6)
        model = small_model()
        images = Tensor(rng.standard_normal((1, 3, 32, 32)))
        at = Tensor(rng.integers(0, 2, (1, 1, 16, 16)).astype(np.float64))
        out = model.forward(images, training=True)
        al = attention_loss(out.attention_logits, at)
        model.zero_grad()
        backward(al)
        for p in model.parameters():
            if p.name.startswith("dmp."):
                assert p.grad is None or not p.grad.any(), p.name
            if p.name.startswith("amp.out."):
                assert p.grad is not None and p.grad.any(), p.name


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        p = Parameter("w", np.array([1.0]))
        p.grad = np.array([1.0])
        state = TrainState()
        cfg = TrainConfig(lr=1e-3, weight_decay=0.0, batch_size=1)
        assert adam_step([p], state, cfg)
        assert state.step == 1
        assert abs((1.0 - p.data[0]) - 1e-3) < 1e-9

    def test_zero_grad_zero_decay_is_fixed_point(self):
        p = Parameter("w", np.array([2.5]))
        p.grad = np.zeros(1)
        state = TrainState()
        cfg = TrainConfig(lr=1e-2, weight_decay=0.0, batch_size=1)
        for _ in range(3):
            adam_step([p], state, cfg)
        assert p.data[0] == 2.5

    def test_five_step_trajectory_matches_scalar_oracle(self):
        """Quadratic bowl f(x) = x^2/2 with coupled weight decay."""
        lr, wd, b1, b2, eps = 1e-2, 0.1, 0.9, 0.999, 1e-8
        p = Parameter("x", np.array([1.0]))
        state = TrainState()
        cfg = TrainConfig(lr=lr, weight_decay=wd, batch_size=1)

        x = 1.0
        m = v = 0.0
        for t in range(1, 6):
            p.grad = np.array([p.data[0]])  # grad of x^2/2
            assert adam_step([p], state, cfg)
            g = x + wd * x
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            assert abs(p.data[0] - x) < 1e-10

    def test_non_finite_gradient_rejects_step(self):
        p = Parameter("w", np.array([1.0]))
        q = Parameter("u", np.array([2.0]))
        p.grad = np.array([np.nan])
        q.grad = np.array([1.0])
        state = TrainState()
        cfg = TrainConfig(lr=1e-2, batch_size=1)
        assert not adam_step([p, q], state, cfg)
        assert state.step == 0 and not state.m
        assert p.data[0] == 1.0 and q.data[0] == 2.0

    def test_params_without_grad_untouched(self):
        p = Parameter("w", np.array([1.0]))
        q = Parameter("u", np.array([2.0]))
        p.grad = np.array([0.5])
        state = TrainState()
        adam_step([p, q], state, TrainConfig(lr=1e-2, weight_decay=0.0, batch_size=1))
        assert q.data[0] == 2.0 and "u" not in state.m


@pytest.fixture(scope="module")
def blob_items(tmp_path_factory):
    root = tmp_path_factory.mktemp("blobs")
    manifest = generate_synthetic_dataset(root, n_images=8, size=64, seed=5)
    return load_dataset(manifest)


def desk_augment(side=64):
    return AugmentConfig(crop=(side, side), short_side_min=side,
                         scale_range=(1.0, 1.0), flip_p=0.5, gamma_p=0.0, gray_p=0.0)


class TestTrainLoop:
    def test_loss_decreases_on_fixed_batch(self, blob_items):
        """One Adam step on a fixed batch lowers the loss on that batch."""
        from sfanet.data import make_batch
        from sfanet.training import optimizer_state_dict

        rng = np.random.default_rng(0)
        model = small_model(dtype="float32", init_seed=11)
        from sfanet.data import augment
        samples = [augment(it.image, it.annotation.points, desk_augment(), rng)
                   for it in blob_items[:4]]
        images, dt, at = make_batch(samples)
        state = TrainState()
        cfg = TrainConfig(lr=1e-4, batch_size=4)

        _, _, before = forward_losses(model, images, dt, at)
        model.zero_grad()
        backward(before)
        adam_step(model.parameters(), state, cfg)
        _, _, after = forward_losses(model, images, dt, at)
        assert after.item() < before.item()

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(small_model(dtype="float32"), [], TrainConfig(batch_size=1))

    def test_ablation_training_touches_no_attention_parameters(self, blob_items):
        model = small_model(dtype="float32", amp_enabled=False, init_seed=12)
        cfg = TrainConfig(lr=1e-4, alpha=0.0, batch_size=4, epochs=1, seed=1,
                          amp_enabled=False)
        report = train(model, blob_items, cfg, augment_cfg=desk_augment())
        assert report.steps == 2
        assert not any(p.name.startswith("amp.") for p in model.parameters())
        assert all(row["L_att"] == 0.0 for row in report.history)

    def test_fixed_seed_bitwise_reproducible(self, blob_items):
        def run():
            model = small_model(dtype="float32", init_seed=13)
            cfg = TrainConfig(lr=1e-4, batch_size=4, epochs=3, seed=99)
            report = train(model, blob_items, cfg, augment_cfg=desk_augment())
            return report, model
        r1, m1 = run()
        r2, m2 = run()
        assert [h["L"] for h in r1.history] == [h["L"] for h in r2.history]
        for p, q in zip(m1.parameters(), m2.parameters()):
            assert p.data.tobytes() == q.data.tobytes(), p.name

    def test_checkpoint_resume_bitwise_equivalent(self, blob_items, tmp_path):
        """train(4 epochs) == train(2), checkpoint, resume, train(2 more)."""
        straight = small_model(dtype="float32", init_seed=14)
        cfg4 = TrainConfig(lr=1e-4, batch_size=4, epochs=4, seed=7)
        train(straight, blob_items, cfg4, augment_cfg=desk_augment())

        first = small_model(dtype="float32", init_seed=14)
        cfg2 = TrainConfig(lr=1e-4, batch_size=4, epochs=2, seed=7)
        train(first, blob_items, cfg2, augment_cfg=desk_augment(),
              out_dir=tmp_path / "half")

        resumed = small_model(dtype="float32", init_seed=14)
        train(resumed, blob_items, cfg4, augment_cfg=desk_augment(),
              resume_from=tmp_path / "half" / "final.sfac")

        for p, q in zip(straight.parameters(), resumed.parameters()):
            assert p.data.tobytes() == q.data.tobytes(), p.name
        for name, b in straight.named_buffers().items():
            q = resumed.named_buffers()[name]
            np.testing.assert_array_equal(np.asarray(b, dtype=np.float32),
                                          np.asarray(q, dtype=np.float32), err_msg=name)

    def test_report_csv_written(self, blob_items, tmp_path):
        model = small_model(dtype="float32", init_seed=15)
        cfg = TrainConfig(lr=1e-4, batch_size=4, epochs=2, seed=3, checkpoint_every=1)
        report = train(model, blob_items, cfg, augment_cfg=desk_augment(),
                       val_items=blob_items[:2], out_dir=tmp_path)
        assert report.csv_path.exists()
        header = report.csv_path.read_text().splitlines()[0]
        assert header == "epoch,step,L,L_den,L_att,val_MAE,val_MSE"
        assert report.final_checkpoint.exists()
        assert (tmp_path / "checkpoint_epoch00001.sfac").exists()
        assert report.best_mae < math.inf
