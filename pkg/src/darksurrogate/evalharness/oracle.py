import torch


class VictimOracle:
    """Black-box victim: exposes the predicted class and nothing else.

    The wrapped model lives only in a closure, so code holding the oracle has
    no attribute path to logits, parameters or gradients. Attack routines
    reject it outright because it is not an ``nn.Module``.
    """

    __slots__ = ("_predict", "name", "num_classes")

    def __init__(self, model, name="victim", batch_size=512):
        model.eval()

        def predict(x):
            x = torch.as_tensor(x).detach()
            dtype = next(model.parameters()).dtype
            with torch.no_grad():
                out = [model(x[i : i + batch_size].to(dtype)).argmax(1) for i in range(0, len(x), batch_size)]
            return torch.cat(out).clone()

        self._predict = predict
        self.name = name
        self.num_classes = model.num_classes

    def __repr__(self):
        return f"VictimOracle({self.name!r})"

    def predict(self, x):
        return self._predict(x)


def untargeted_success(victim, x_adv, y):
    """True where the victim's prediction differs from the true label."""
    y = torch.as_tensor(y)
    if len(y) != len(x_adv):
        raise ValueError("x_adv and y disagree on sample count")
    return victim.predict(x_adv) != y


def targeted_success(victim, x_adv, y_t):
    """True where the victim predicts the target label."""
    y_t = torch.as_tensor(y_t)
    if len(y_t) != len(x_adv):
        raise ValueError("x_adv and y_t disagree on sample count")
    if (y_t < 0).any() or (y_t >= victim.num_classes).any():
        raise ValueError(f"target label out of range for {victim.num_classes} classes")
    return victim.predict(x_adv) == y_t


def derive_targets(y, num_classes, rng):
    """A target label different from the true one for every sample."""
    y = torch.as_tensor(y)
    shift = torch.from_numpy(rng.integers(1, num_classes, len(y)))
    return (y + shift) % num_classes
