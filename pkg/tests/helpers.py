import numpy as np

from csta import tensor as tc
from csta.data import FixedSample
from csta.model import ConvSpec, ModelConfig, forward
from csta.tensor import Tensor

from conftest import central_diff, rel_err


def tiny_config(num_classes=3, **kw):
    base = dict(
        num_classes=num_classes,
        frames=6,
        interp_joints=8,
        convs=(ConvSpec(4, 3, 1, 1), ConvSpec(4, 3, 2, 1)),
        fc_widths=(8, 6),
    )
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, config, batch=4, scale=0.3):
    pos = rng.normal(0, scale, (batch, config.frames, config.joints, 3))
    samples = [FixedSample.from_position(p, int(rng.integers(config.num_classes))) for p in pos]
    return (
        np.stack([s.position for s in samples]),
        np.stack([s.motion for s in samples]),
        np.array([s.label for s in samples]),
    )


def randomize_biases(params, rng, scale=0.1):
    for name, t in params.tensors.items():
        if name.endswith(("bias", "b_s", "b_t")):
            t.data[...] = rng.normal(0, scale, t.shape)


def loss_value(params, pos, mot, labels, mode=None):
    return tc.softmax_cross_entropy(forward(Tensor(pos), Tensor(mot), params, mode), labels).item()


def model_gradient_errors(params, pos, mot, labels, rng, max_coords=None, eps=1e-5, mode=None, n_random=None):
    """Max relative error per parameter tensor between tape gradients and
    central differences. Tensors larger than ``max_coords`` are checked on
    ``n_random`` (default ``max_coords``) random coordinates plus the
    largest-gradient one."""
    params.zero_grad()
    with tc.Tape() as tape:
        loss = tc.softmax_cross_entropy(forward(Tensor(pos), Tensor(mot), params, mode), labels)
    tape.backward(loss)
    errors = {}
    for name, t in params.tensors.items():
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy()
        idx = None
        if max_coords is not None and t.size > max_coords:
            idx = rng.choice(t.size, n_random or max_coords, replace=False)
            # always include the coordinate with the largest gradient
            idx = np.union1d(idx, [int(np.argmax(np.abs(analytic)))])
        original = t.data

        def f(a, t=t):
            t.data = a
            return loss_value(params, pos, mot, labels, mode)

        fd = central_diff(f, original, eps, idx)
        t.data = original
        errors[name] = max(rel_err(analytic[i], v) for i, v in fd.items())
    return errors
