"""
Contains the small torch MLP used by the bench. Parameters cross the torch
boundary as NamedTensorSets with names "W0", "b0", "W1", ... so that every
weight-space operation (task vectors, switches, merges) works on them directly.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tswitch.utils.errors import ShapeMismatchError, UserError
from tswitch.utils.tensorstore import NamedTensorSet


@dataclass
class ModelSpec:
    """
    Layer dims [d_in, h_1, ..., d_out]. ReLU on hidden layers, identity on the output.
    """

    d_in: int
    d_out: int
    hidden: list = field(default_factory=lambda: [64, 64])

    def __post_init__(self):
        self.hidden = [int(h) for h in self.hidden]
        if self.d_in < 1 or self.d_out < 1 or any(h < 1 for h in self.hidden):
            raise UserError("layer dims must be positive, got {}".format(self.dims))

    @property
    def dims(self):
        return [int(self.d_in)] + list(self.hidden) + [int(self.d_out)]

    @property
    def n_layers(self):
        return len(self.dims) - 1

    @property
    def feature_dim(self):
        return self.dims[-2]

    def param_shapes(self):
        shapes = []
        for l, (d_a, d_b) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            shapes.append(("W{}".format(l), (d_b, d_a)))
            shapes.append(("b{}".format(l), (d_b,)))
        return shapes

    @classmethod
    def from_tensor_set(cls, params):
        """
        Recover the layer dims from a parameter set laid out as W0, b0, W1, b1, ...
        """
        n_layers = len(params) // 2
        if n_layers < 1 or len(params) != 2 * n_layers:
            raise ShapeMismatchError("parameter set does not look like an MLP: {}".format(params.names))
        dims = []
        for l in range(n_layers):
            name = "W{}".format(l)
            if name not in params or len(params[name].shape) != 2:
                raise ShapeMismatchError("missing or malformed weight {}".format(name))
            out_dim, in_dim = params[name].shape
            if dims and dims[-1] != in_dim:
                raise ShapeMismatchError("layer {} expects {} inputs, previous layer gives {}".format(l, in_dim, dims[-1]))
            if not dims:
                dims.append(in_dim)
            dims.append(out_dim)
        spec = cls(d_in=dims[0], d_out=dims[-1], hidden=dims[1:-1])
        if [tuple(s) for _, s in spec.param_shapes()] != [tuple(s) for s in params.shapes]:
            raise ShapeMismatchError("parameter names or shapes do not match an MLP with dims {}".format(dims))
        return spec


class ToyMLP(nn.Module):
    def __init__(self, spec, seed=None):
        """
        Args:
            spec (ModelSpec): layer dims
            seed (int): if given, the default torch initialization is drawn
                from a generator seeded with it, leaving the global RNG untouched
        """
        super(ToyMLP, self).__init__()
        self.spec = spec
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(int(seed))
            self.layers = nn.ModuleList(
                [nn.Linear(d_a, d_b) for d_a, d_b in zip(spec.dims[:-1], spec.dims[1:])]
            )

    def features(self, x):
        """
        Activations entering the final linear layer.
        """
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        return x

    def forward(self, x):
        return self.layers[-1](self.features(x))

    # conversion

    def to_tensor_set(self, meta=None):
        entries = []
        for l, layer in enumerate(self.layers):
            entries.append(("W{}".format(l), layer.weight.detach().cpu().numpy().astype(np.float32)))
            entries.append(("b{}".format(l), layer.bias.detach().cpu().numpy().astype(np.float32)))
        return NamedTensorSet(entries, meta=meta)

    def load_tensor_set(self, params):
        expected = [(name, tuple(shape)) for name, shape in self.spec.param_shapes()]
        got = [(name, tuple(shape)) for name, shape in zip(params.names, params.shapes)]
        if expected != got:
            raise ShapeMismatchError("parameter set {} does not fit model {}".format(got, expected))
        with torch.no_grad():
            for l, layer in enumerate(self.layers):
                # arrays in a NamedTensorSet are read-only, torch needs a writable copy
                layer.weight.copy_(torch.from_numpy(np.array(params["W{}".format(l)])))
                layer.bias.copy_(torch.from_numpy(np.array(params["b{}".format(l)])))
        return self

    @classmethod
    def from_tensor_set(cls, params, spec=None):
        spec = ModelSpec.from_tensor_set(params) if spec is None else spec
        return cls(spec).load_tensor_set(params)
