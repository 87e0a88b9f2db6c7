import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fdcheck import max_relative_error
from luvtad import diffusion as D
from luvtad import nncore as N
from luvtad.errors import ConfigError, DataContractError, ShapeError
from luvtad.wavesim import ImageSequence


def closed_form_alpha_bar(t, T, s=0.008):
    f = lambda u: math.cos(((u / T + s) / (1 + s)) * math.pi / 2) ** 2  # noqa: E731
    return f(t) / f(0)


def test_cosine_schedule_invariants():
    sch = D.cosine_schedule(1000)
    assert sch.alpha_bar[0] == 1.0
    assert np.all(np.diff(sch.alpha_bar) < 0)
    b = sch.beta[1:]
    assert np.all(b > 0) and np.all(b <= 0.999)
    assert abs(sch.alpha_bar[500] - 0.494) <= 0.005
    assert sch.alpha_bar[500] == pytest.approx(closed_form_alpha_bar(500, 1000), rel=1e-9)
    assert sch.alpha_bar_prev[1] == 1.0 and sch.alpha_bar_prev[10] == sch.alpha_bar[9]
    for T in (200, 1000):
        assert D.cosine_schedule(T).alpha_bar[T] < 0.01
    with pytest.raises(ConfigError):
        D.cosine_schedule(0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 400))
def test_schedule_matches_closed_form_until_clip(T):
    sch = D.cosine_schedule(T)
    np.testing.assert_allclose(sch.alpha, 1 - sch.beta)
    for t in {1, max(1, T // 2), max(1, T - 2)}:
        if sch.beta[1 : t + 1].max() < 0.999:
            assert sch.alpha_bar[t] == pytest.approx(closed_form_alpha_bar(t, T), rel=1e-9)


def test_forward_sample_limits_and_errors():
    sch = D.cosine_schedule(100)
    x0 = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    e = torch.randn_like(x0)
    torch.testing.assert_close(D.forward_sample(x0, 30, torch.zeros_like(x0), sch), math.sqrt(sch.alpha_bar[30]) * x0)
    torch.testing.assert_close(D.forward_sample(torch.zeros_like(x0), 30, e, sch), math.sqrt(1 - sch.alpha_bar[30]) * e)
    per = D.forward_sample(x0, torch.tensor([30, 30]), e, sch)
    torch.testing.assert_close(per, D.forward_sample(x0, 30, e, sch))
    for bad in (0, 101):
        with pytest.raises(ConfigError):
            D.forward_sample(x0, bad, e, sch)
    with pytest.raises(ConfigError):
        D.forward_sample(x0, torch.tensor([1, 0]), e, sch)
    with pytest.raises(ShapeError):
        D.forward_sample(x0, 3, e[:1], sch)


@pytest.mark.parametrize("t", [100, 500, 900])
def test_forward_moments(t):
    sch = D.cosine_schedule(1000)
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(10_000, dtype=torch.float64, generator=g)
    x0 = (x0 - x0.mean()) / x0.std()
    eps = torch.randn(10_000, dtype=torch.float64, generator=g)
    xt = D.forward_sample(x0, t, eps, sch)
    ab = sch.alpha_bar[t]
    # unit-variance zero-mean input: Var[x_t] = abar + (1 - abar) = 1
    assert xt.var().item() == pytest.approx(1.0, rel=0.03)
    assert abs(xt.mean().item()) <= 0.03
    # given x0, x_t - sqrt(abar) x0 carries the noise term alone
    assert (xt - math.sqrt(ab) * x0).var().item() == pytest.approx(1 - ab, rel=0.03)


def test_simplex_properties():
    cfg = D.SimplexNoiseConfig(seed=3)
    a = D.simplex_noise(100, 100, cfg)
    np.testing.assert_array_equal(a, D.simplex_noise(100, 100, cfg))
    assert a.shape == (100, 100)
    assert a.min() >= -1 and a.max() <= 1
    means = [D.simplex_noise(100, 100, D.SimplexNoiseConfig(seed=s)).mean() for s in range(8)]
    assert abs(np.mean(means)) <= 0.05

    def lag1(f):
        f = f - f.mean()
        return (f[:, 1:] * f[:, :-1]).mean() / f.var()

    white = np.random.default_rng(0).normal(size=(100, 100))
    assert lag1(a) > 0.5
    assert abs(lag1(white)) < 0.05
    assert not np.array_equal(a, D.simplex_noise(100, 100, D.SimplexNoiseConfig(seed=4)))


def test_simplex_config_errors():
    for bad in (D.SimplexNoiseConfig(octaves=0), D.SimplexNoiseConfig(persistence=0.0), D.SimplexNoiseConfig(persistence=1.5)):
        with pytest.raises(ConfigError):
            D.simplex_noise(8, 8, bad)
    with pytest.raises(ConfigError):
        D.simplex_noise(0, 8)


def test_noise_sampler_standardised():
    s = D.NoiseSampler("simplex", 1)
    e = s((4, 1, 32, 32), torch.float64)
    assert e.shape == (4, 1, 32, 32)
    torch.testing.assert_close(e.mean(dim=(2, 3)), torch.zeros(4, 1, dtype=torch.float64), atol=1e-9, rtol=0)
    torch.testing.assert_close(e.std(dim=(2, 3), unbiased=False), torch.ones(4, 1, dtype=torch.float64), atol=1e-6, rtol=0)
    with pytest.raises(ConfigError):
        D.NoiseSampler("pink")


class EchoNoise:
    """Stub denoiser that returns the noise that produced ``x_t`` from a known ``x0``."""

    def __init__(self, x0, schedule):
        self.x0, self.sch = x0, schedule

    def __call__(self, x_t, t):
        ab = torch.as_tensor(self.sch.alpha_bar, dtype=x_t.dtype)[t].view(-1, 1, 1, 1)
        return (x_t - ab.sqrt() * self.x0) / (1 - ab).sqrt()


def test_ddpm_loss_stubs():
    sch = D.cosine_schedule(200)
    x0 = torch.rand(8, 1, 6, 6, dtype=torch.float64) * 2 - 1
    loss = D.ddpm_loss(EchoNoise(x0, sch), x0, sch, D.NoiseSampler("gaussian", 0))
    assert loss.item() == pytest.approx(0.0, abs=1e-20)
    x0 = torch.zeros(100, 1, 10, 10, dtype=torch.float64)
    zero = lambda x, t: torch.zeros_like(x)  # noqa: E731
    loss = D.ddpm_loss(zero, x0, sch, D.NoiseSampler("gaussian", 1))
    assert abs(loss.item() - 1.0) <= 0.05
    loss = D.ddpm_loss(zero, x0, sch, D.NoiseSampler("simplex", 1))
    assert loss.item() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ShapeError):
        D.ddpm_loss(zero, x0[:0], sch, D.NoiseSampler())


def test_ddpm_loss_finite_differences():
    torch.manual_seed(4)
    model = N.UNetDenoiser(N.UNetSpec(widths=(4, 8), max_groups=2)).double()
    sch = D.cosine_schedule(50)
    x0 = torch.rand(2, 1, 4, 4, dtype=torch.float64) * 2 - 1
    t = torch.tensor([7, 33])
    for kind in ("gaussian", "simplex"):
        fn = lambda: D.ddpm_loss(model, x0, sch, D.NoiseSampler(kind, 5), t)  # noqa: E731
        err, report = max_relative_error(fn, model.named_parameters(), max_entries=6)
        assert err <= 1e-4, report


def test_reverse_step_terminal_and_posterior_identity():
    sch = D.cosine_schedule(100)
    g = torch.Generator().manual_seed(0)
    x0 = torch.rand(3, 1, 5, 5, dtype=torch.float64, generator=g) * 2 - 1
    eps = torch.randn(x0.shape, dtype=torch.float64, generator=g)
    stub = EchoNoise(x0, sch)
    for t in (1, 2, 17, 60, 100):
        xt = D.forward_sample(x0, t, eps, sch)
        out = D.reverse_step(stub, xt, t, sch, add_noise=False)
        assert out.shape == xt.shape
        assert (out - D.posterior_mean(x0, xt, t, sch)).abs().max().item() <= 1e-10
    x1 = D.forward_sample(x0, 1, eps, sch)
    torch.testing.assert_close(
        D.reverse_step(stub, x1, 1, sch, D.NoiseSampler("gaussian", 9)),
        D.reverse_step(stub, x1, 1, sch, add_noise=False),
        rtol=0,
        atol=0,
    )
    with pytest.raises(ConfigError):
        D.reverse_step(stub, x1, 0, sch)


def test_reverse_step_noise_variance():
    sch = D.cosine_schedule(100)
    x = torch.zeros(4000, 1, 1, 1, dtype=torch.float64)
    zero = lambda x, t: torch.zeros_like(x)  # noqa: E731
    out = D.reverse_step(zero, x, 50, sch, D.NoiseSampler("gaussian", 2))
    var = (1 - sch.alpha_bar[49]) / (1 - sch.alpha_bar[50]) * sch.beta[50]
    assert out.var().item() == pytest.approx(var, rel=0.08)


def tiny_model():
    torch.manual_seed(0)
    return N.UNetDenoiser(N.UNetSpec(widths=(4, 8), max_groups=2)).eval()


def test_reconstruct_deterministic_and_seed_sensitive():
    sch = D.cosine_schedule(20)
    m = tiny_model()
    x0 = torch.rand(2, 1, 16, 16) * 2 - 1
    cfg = D.ReconstructionConfig(lambda_t=5, seed=1)
    a = D.reconstruct(m, x0, cfg, sch)
    torch.testing.assert_close(a, D.reconstruct(m, x0, cfg, sch), rtol=0, atol=0)
    assert a.min() >= -1 and a.max() <= 1
    b = D.reconstruct(m, x0, D.ReconstructionConfig(lambda_t=5, seed=2), sch)
    assert not torch.equal(a, b)
    with pytest.raises(ConfigError):
        D.reconstruct(m, x0, D.ReconstructionConfig(lambda_t=21), sch)
    assert D.default_depth(1000) == 250 and D.default_depth(200) == 50


def test_full_depth_forgets_input():
    # with a trivial eps-predictor, lambda = T output is dominated by fresh noise
    sch = D.cosine_schedule(200)
    zero = lambda x, t: torch.zeros_like(x)  # noqa: E731
    x0 = torch.rand(1, 1, 32, 32, dtype=torch.float64) * 2 - 1

    def corr(a, b):
        return float(np.corrcoef(a.reshape(-1), b.reshape(-1))[0, 1])

    deep = [D.reconstruct(zero, x0, D.ReconstructionConfig(200, "gaussian", s), sch) for s in (1, 2)]
    shallow = D.reconstruct(zero, x0, D.ReconstructionConfig(None, "gaussian", 1), sch)
    assert abs(corr(deep[0], deep[1])) < 0.2
    assert corr(deep[0], x0) < corr(shallow, x0)


def smooth_sequences(n, size=16, k=2, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] / size
    out = []
    for i in range(n):
        frames = []
        for j in range(k):
            ph = rng.uniform(0, 2 * np.pi)
            frames.append(0.5 + 0.4 * np.sin(2 * np.pi * (yy + 0.3 * xx) + ph))
        out.append(ImageSequence(np.array(frames, np.float32), id=f"ok{i}"))
    return out


FAST = dict(T=20, epochs=6, batch_size=4, lr=2e-3, widths=(4, 8), noise_kind="gaussian", seed=3)


def test_train_rejects_defective_sequences():
    seqs = smooth_sequences(2)
    seqs.append(ImageSequence(seqs[0].frames, "defective", (3.0, 3.0), 1.0, id="bad"))
    with pytest.raises(DataContractError, match="bad"):
        D.train_ddpm(seqs, D.DiffusionTrainConfig(**FAST))
    with pytest.raises(DataContractError):
        D.train_ddpm([], D.DiffusionTrainConfig(**FAST))


def test_defaults_follow_reference_configuration():
    cfg = D.DiffusionTrainConfig()
    assert (cfg.T, cfg.epochs, cfg.lr, cfg.noise_kind) == (1000, 1000, 1e-6, "simplex")


def test_training_loss_trend_and_checkpoint(tmp_path):
    path = tmp_path / "ddpm.ckpt"
    cfg = D.DiffusionTrainConfig(**{**FAST, "epochs": 20})
    model, log = D.train_ddpm(smooth_sequences(8), cfg, checkpoint=str(path))
    n = max(1, len(log.losses) // 10)
    assert np.mean(log.losses[-n:]) < np.mean(log.losses[:n])
    loaded, meta = D.load_denoiser(path)
    assert meta["epoch"] == 20 and meta["loss_digest"] == log.digest()
    for k, v in model.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])
    log.write_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,mean_loss,wall_time_s"


@pytest.mark.parametrize("kind,ema", [("gaussian", 0.0), ("simplex", 0.0), ("gaussian", 0.9)])
def test_interrupted_training_resumes_exactly(tmp_path, kind, ema):
    cfg = D.DiffusionTrainConfig(**{**FAST, "noise_kind": kind, "ema_decay": ema})
    seqs = smooth_sequences(4)
    full, full_log = D.train_ddpm(seqs, cfg)
    path = str(tmp_path / "r.ckpt")
    D.train_ddpm(seqs, cfg, checkpoint=path, stop_after=2)
    D.train_ddpm(seqs, cfg, checkpoint=path, resume=True, stop_after=2)
    resumed, log = D.train_ddpm(seqs, cfg, checkpoint=path, resume=True)
    assert log.losses == full_log.losses and log.epochs == list(range(1, 7))
    for k, v in full.state_dict().items():
        assert torch.equal(v, resumed.state_dict()[k])


def test_ema_weights_used_for_inference(tmp_path):
    path = str(tmp_path / "e.ckpt")
    cfg = D.DiffusionTrainConfig(**{**FAST, "epochs": 3, "ema_decay": 0.5})
    model, _ = D.train_ddpm(smooth_sequences(4), cfg, checkpoint=path)
    averaged, _ = D.load_denoiser(path)
    raw, _ = D.load_denoiser(path, use_ema=False)
    tensors, _ = N.load_checkpoint(path)
    for k, v in averaged.state_dict().items():
        assert torch.equal(v, tensors[f"ema/{k}"]) and torch.equal(v, model.state_dict()[k])
    assert any(not torch.equal(v, raw.state_dict()[k]) for k, v in averaged.state_dict().items())
    with pytest.raises(ConfigError):
        D.train_ddpm(smooth_sequences(1), D.DiffusionTrainConfig(**{**FAST, "ema_decay": 1.0}))
