"""
Registered toy architectures.

Every model is a :class:`Classifier`: ``features(x)`` is the penultimate
activation (used as the face embedding) and ``head`` maps it to ``K``
logits. Architectures are looked up by string id so checkpoints can
rebuild them.
"""

import math

import torch
from torch import nn


class Classifier(nn.Module):
    architecture_id = None

    def __init__(self, num_classes, in_shape, embed_dim):
        super().__init__()
        self.num_classes = int(num_classes)
        self.in_shape = tuple(int(s) for s in in_shape)
        self.embed_dim = int(embed_dim)
        self.head = nn.Linear(self.embed_dim, self.num_classes)

    def features(self, x):
        raise NotImplementedError

    def forward(self, x):
        return self.head(self.features(x))

    def arch_kwargs(self):
        """Constructor keyword arguments beyond ``num_classes``/``in_shape``."""
        return {}


class ConvNetA(Classifier):
    """Three 3x3 conv blocks with batch norm, global average pooled."""

    architecture_id = "conv_a"

    def __init__(self, num_classes, in_shape, widths=(16, 32, 64)):
        widths = tuple(int(w) for w in widths)
        super().__init__(num_classes, in_shape, widths[-1])
        layers, c = [], in_shape[0]
        for i, w in enumerate(widths):
            layers += [
                nn.Conv2d(c, w, 3, stride=1 if i == 0 else 2, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(),
            ]
            c = w
        self.body = nn.Sequential(*layers)
        self.widths = widths

    def features(self, x):
        return self.body(x).mean(dim=(2, 3))

    def arch_kwargs(self):
        return {"widths": list(self.widths)}


class ConvNetB(Classifier):
    """Two 5x5 conv + max-pool stages and a dense embedding layer; no batch norm."""

    architecture_id = "conv_b"

    def __init__(self, num_classes, in_shape, widths=(24, 48), embed_dim=96):
        super().__init__(num_classes, in_shape, embed_dim)
        c, h, w = in_shape
        self.widths = tuple(int(v) for v in widths)
        self.body = nn.Sequential(
            nn.Conv2d(c, self.widths[0], 5, padding=2),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(self.widths[0], self.widths[1], 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Flatten(),
        )
        self.fc = nn.Linear(self.widths[1] * (h // 4) * (w // 4), embed_dim)

    def features(self, x):
        return torch.relu(self.fc(self.body(x)))

    def arch_kwargs(self):
        return {"widths": list(self.widths), "embed_dim": self.embed_dim}


class MLP(Classifier):
    architecture_id = "mlp"

    def __init__(self, num_classes, in_shape, hidden=(256, 128)):
        hidden = tuple(int(h) for h in hidden)
        super().__init__(num_classes, in_shape, hidden[-1])
        dims = [math.prod(in_shape), *hidden]
        layers = [nn.Flatten()]
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.hidden = hidden

    def features(self, x):
        return self.body(x)

    def arch_kwargs(self):
        return {"hidden": list(self.hidden)}


class Linear(Classifier):
    """``f(x) = W x + b`` on the flattened image; its "embedding" is the input itself."""

    architecture_id = "linear"

    def __init__(self, num_classes, in_shape, bias=True):
        super().__init__(num_classes, in_shape, math.prod(in_shape))
        if not bias:
            self.head = nn.Linear(self.embed_dim, self.num_classes, bias=False)
        self.bias = bool(bias)

    def features(self, x):
        return x.flatten(1)

    def arch_kwargs(self):
        return {"bias": self.bias}


ARCHITECTURES = {cls.architecture_id: cls for cls in (ConvNetA, ConvNetB, MLP, Linear)}


def init_parameters(model, rng):
    """Re-draw all weights from ``rng`` (Kaiming-uniform weights, uniform biases)."""
    g = rng.torch_generator()
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_uniform_(module.weight, a=math.sqrt(5), generator=g)
                if module.bias is not None:
                    fan_in = module.weight[0].numel()
                    bound = 1 / math.sqrt(fan_in)
                    nn.init.uniform_(module.bias, -bound, bound, generator=g)
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()
    return model


def build_model(arch, num_classes, in_shape, rng=None, **kwargs):
    """Instantiate a registered architecture; weights drawn from ``rng`` when given."""
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise KeyError(f"unknown architecture_id {arch!r}; registered: {sorted(ARCHITECTURES)}") from None
    model = cls(num_classes, in_shape, **kwargs)
    if rng is not None:
        init_parameters(model, rng)
    return model.eval()


def zero_parameters(model):
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def parameter_vector(model):
    return torch.cat([p.detach().flatten() for p in model.parameters()])
