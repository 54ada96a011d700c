"""
Parametric image generators used as desk-scale stand-ins for real data.

Images are rendered from a latent code by a fixed random "renderer": a
set of smooth basis patterns combined linearly, squashed by a sigmoid and
shifted by a random translation. Classes (or face identities) are points
in latent space, so visually similar classes are close latent neighbours
and a trained classifier's soft outputs carry real similarity information.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core.data import Dataset
from .core.rng import Rng


def _smooth_noise(rng, n, c, h, w, sigma):
    noise = torch.from_numpy(rng.normal(size=(n * c, 1, h, w)))
    radius = max(1, int(3 * sigma))
    t = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    k = k / k.sum()
    out = F.conv2d(F.pad(noise, (radius, radius, 0, 0), mode="circular"), k.view(1, 1, 1, -1))
    out = F.conv2d(F.pad(out, (0, 0, radius, radius), mode="circular"), k.view(1, 1, -1, 1))
    out = out.view(n, c, h, w)
    return out / out.flatten(1).std(dim=1).view(n, 1, 1, 1)


@dataclass
class Renderer:
    """Fixed random map from a latent vector to a ``(c, h, w)`` image in [0, 1]."""

    basis: torch.Tensor  # (latent_dim, c, h + 2*shift, w + 2*shift)
    gain: float
    shift: int
    noise: float

    @classmethod
    def create(cls, rng, latent_dim, shape=(3, 16, 16), smoothness=1.5, gain=1.0, shift=2, noise=0.03):
        c, h, w = shape
        basis = _smooth_noise(rng, latent_dim, c, h + 2 * shift, w + 2 * shift, smoothness)
        basis = basis / np.sqrt(latent_dim)
        return cls(basis, gain, shift, noise)

    @property
    def shape(self):
        c, H, W = self.basis.shape[1:]
        return c, H - 2 * self.shift, W - 2 * self.shift

    def render(self, z, rng):
        z = torch.as_tensor(z, dtype=torch.float64)
        n = z.shape[0]
        c, h, w = self.shape
        canvas = torch.einsum("nl,lchw->nchw", z, self.basis)
        s = self.shift
        dy = rng.integers(0, 2 * s + 1, n)
        dx = rng.integers(0, 2 * s + 1, n)
        out = torch.empty(n, c, h, w, dtype=torch.float64)
        for i in range(n):
            out[i] = canvas[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out = torch.sigmoid(self.gain * out)
        if self.noise:
            out = out + self.noise * torch.from_numpy(rng.normal(size=out.shape))
        return out.clamp(0, 1).to(torch.float32)


@dataclass
class ClassWorld:
    """Hierarchical class centres plus the renderer that draws them."""

    renderer: Renderer
    centers: torch.Tensor  # (K, latent_dim)
    superclass: np.ndarray
    spread: float
    blend: float

    @property
    def num_classes(self):
        return self.centers.shape[0]

    def sample(self, n, rng, split="train", prefix="s"):
        """Draw ``n`` labelled images (balanced over classes)."""
        k = self.num_classes
        labels = np.arange(n) % k
        labels = labels[rng.permutation(n)]
        others = (labels + rng.integers(1, k, n)) % k
        omega = rng.random(n) * self.blend
        mu = self.centers[labels]
        z = (1 - omega[:, None]) * mu.numpy() + omega[:, None] * self.centers[others].numpy()
        z = z + self.spread * rng.normal(size=z.shape)
        images = self.renderer.render(z, rng)
        ids = [f"{prefix}{i}" for i in range(n)]
        return Dataset(images, torch.from_numpy(labels), k, ids=ids, splits=[split] * n)


def make_class_world(seed, num_classes=10, num_super=5, latent_dim=16, shape=(3, 16, 16),
                     super_scale=2.0, class_scale=1.2, spread=0.6, blend=0.35, **renderer_kw):
    rng = Rng(seed, "toydata/world")
    renderer = Renderer.create(rng.child("renderer"), latent_dim, shape, **renderer_kw)
    supers = rng.normal(size=(num_super, latent_dim)) * super_scale
    superclass = np.arange(num_classes) % num_super
    centers = supers[superclass] + rng.normal(size=(num_classes, latent_dim)) * class_scale
    return ClassWorld(renderer, torch.from_numpy(centers), superclass, spread, blend)


@dataclass
class IdentityWorld:
    """Face-like identities: each identity is a random latent code.

    With ``families`` set, identity codes are drawn around a fixed set of
    family centres shared by every sample call, so identities in disjoint
    sets still resemble each other in a structured way.
    """

    renderer: Renderer
    id_scale: float
    spread: float
    families: np.ndarray = None

    def sample_identities(self, n_ids, per_id, rng, split="train"):
        dim = self.renderer.basis.shape[0]
        if self.families is None:
            mu = rng.normal(size=(n_ids, dim)) * self.id_scale
        else:
            fam = rng.integers(0, len(self.families), n_ids)
            mu = self.families[fam] + rng.normal(size=(n_ids, dim)) * self.id_scale
        labels = np.repeat(np.arange(n_ids), per_id)
        z = mu[labels] + self.spread * rng.normal(size=(n_ids * per_id, mu.shape[1]))
        images = self.renderer.render(z, rng)
        ids = [f"{i}_{j}" for i in range(n_ids) for j in range(per_id)]
        return Dataset(images, torch.from_numpy(labels), n_ids, ids=ids, splits=[split] * len(labels))


def make_identity_world(seed, latent_dim=24, shape=(3, 16, 16), id_scale=1.0, spread=0.45, num_families=0,
                        family_scale=1.0, **renderer_kw):
    rng = Rng(seed, "toydata/identities")
    renderer = Renderer.create(rng.child("renderer"), latent_dim, shape, **renderer_kw)
    families = rng.child("families").normal(size=(num_families, latent_dim)) * family_scale if num_families else None
    return IdentityWorld(renderer, id_scale, spread, families)
