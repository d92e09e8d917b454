import numpy as np
import pytest
import torch

from spade_ad import dataset as D
from spade_ad import models as M

# Tiny architectures keep unit tests fast; real-scale runs live in test_acceptance.
TINY_VAE = M.VaeConfig(input_size=40, channels=(8, 16), latent_dim=8)
TINY_CNN = M.CnnConfig(input_size=40, channels=(8, 16))
TINY_TRAIN = M.TrainConfig(minibatch_size=16, max_epochs=6, convergence_patience=3, seed=0)
TINY_NOISE = D.NoiseConfig(sigma_mean=20, sigma_std=10, scale_min=12, scale_max=40, output_size=40)


def make_synthetic_source(n_per_digit: int = 30, seed: int = 7) -> D.SourceCorpus:
    """Procedural stand-in corpus: one fixed blocky template per digit class,
    jittered per sample. Unpartitioned, 28x28 uint8."""
    images, labels = [], []
    for digit in range(10):
        template_rng = np.random.default_rng((seed, digit))
        template = (template_rng.random((4, 4)) > 0.45).astype(np.float64) * 220.0
        template = np.kron(template, np.ones((7, 7)))
        sample_rng = np.random.default_rng((seed, digit, 100))
        for _ in range(n_per_digit):
            img = np.roll(template, sample_rng.integers(-2, 3, 2), axis=(0, 1))
            img = img * sample_rng.uniform(0.7, 1.0) + sample_rng.normal(0, 8, (28, 28))
            images.append(np.clip(img, 0, 255).astype(np.uint8))
            labels.append(digit)
    return D.SourceCorpus(images=np.stack(images), labels=np.array(labels, dtype=np.int64))


@pytest.fixture(scope="session")
def synthetic_source():
    return make_synthetic_source()


@pytest.fixture(scope="session")
def tiny_split(synthetic_source):
    spec = D.SplitSpec(normal_digit=0, known_anomaly_digit=3, train_fraction=0.8, seed=1)
    return D.build_splits(synthetic_source, spec, TINY_NOISE)


@pytest.fixture(scope="session")
def tiny_models(tiny_split):
    vae = M.train_vae(tiny_split, TINY_TRAIN, TINY_VAE, verbose=False)
    cnn = M.train_cnn(tiny_split, TINY_TRAIN, TINY_CNN, verbose=False)
    return vae, cnn


# ---------------------------------------------------------------------------
# Independent oracles (kept free of the code paths they check).
# ---------------------------------------------------------------------------


def fd_param_gradients(loss_fn, model: torch.nn.Module, step: float) -> dict:
    """Central finite differences of loss_fn() with respect to every parameter."""
    grads = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = torch.zeros_like(p)
            flat, gf = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(loss_fn())
                flat[i] = orig - step
                lo = float(loss_fn())
                flat[i] = orig
                gf[i] = (hi - lo) / (2.0 * step)
            grads[name] = g
    return grads


def analytic_param_gradients(loss_fn, model: torch.nn.Module) -> dict:
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    return {name: p.grad.detach().clone() for name, p in model.named_parameters()}


def assert_gradients_close(analytic: dict, numeric: dict, rtol: float, atol: float = 1e-7):
    for name in numeric:
        a, n = analytic[name], numeric[name]
        if not torch.allclose(a, n, rtol=rtol, atol=atol):
            worst = (a - n).abs().max().item()
            raise AssertionError(f"gradient mismatch for {name}: max abs diff {worst:.3e}")


def pairwise_auc(scores, labels) -> float:
    """Brute-force Mann-Whitney probability: anomaly beats normal, ties half."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))
