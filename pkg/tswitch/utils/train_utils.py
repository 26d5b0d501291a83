"""
This file contains the training and evaluation loops for the bench model.
Training runs single-threaded with a seeded shuffle so that the same seed
always reproduces the same parameters bit for bit.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from tswitch.models.toy_nets import ModelSpec, ToyMLP
from tswitch.utils.errors import TrainingDivergedError, UserError
from tswitch.utils.file_utils import single_threaded


def _hyper(hyper, key, default=None):
    if key in hyper:
        return hyper[key]
    if default is None:
        raise UserError("training hyperparameters are missing {!r}".format(key))
    return default


def train(model_init, data, hyper, seed, spec=None):
    """
    Minibatch SGD with cross-entropy loss.

    Args:
        model_init (NamedTensorSet): starting parameters
        data (Split): labeled training data
        hyper (dict or Config): lr, epochs, batch_size and optional momentum
        seed (int): seeds the minibatch shuffle
        spec (ModelSpec): layer dims, inferred from @model_init if None

    Returns:
        params (NamedTensorSet): trained parameters, meta copied from @model_init
    """
    lr = float(_hyper(hyper, "lr"))
    epochs = int(_hyper(hyper, "epochs"))
    batch_size = int(_hyper(hyper, "batch_size"))
    momentum = float(_hyper(hyper, "momentum", 0.0))
    if not lr >= 0.0 or epochs < 0 or batch_size < 1:
        raise UserError("invalid hyperparameters lr={} epochs={} batch_size={}".format(lr, epochs, batch_size))
    if data.y is None:
        raise UserError("training data has no labels")
    if not np.isfinite(data.x).all():
        raise UserError("training inputs contain NaN or Inf")

    with single_threaded():
        model = ToyMLP.from_tensor_set(model_init, spec=spec)
        if len(data) == 0 or epochs == 0:
            return model.to_tensor_set(meta=model_init.meta)
        if data.y.max() >= model.spec.d_out:
            raise UserError("label {} out of range for {} outputs".format(int(data.y.max()), model.spec.d_out))

        dataset = TensorDataset(torch.from_numpy(data.x.copy()), torch.from_numpy(data.y.copy()))
        generator = torch.Generator()
        generator.manual_seed(int(seed))
        loader = DataLoader(dataset, batch_size=batch_size, shuffle=True, generator=generator)
        optimizer = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)

        model.train()
        for epoch in range(epochs):
            for x, y in loader:
                optimizer.zero_grad()
                loss = F.cross_entropy(model(x), y)
                if not math.isfinite(loss.item()):
                    raise TrainingDivergedError(
                        "loss became {} in epoch {} (lr={})".format(loss.item(), epoch, lr)
                    )
                loss.backward()
                optimizer.step()
        return model.to_tensor_set(meta=model_init.meta)


def logits(params, x, spec=None):
    """
    Output logits of the MLP with @params on inputs @x, as a float32 numpy array.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    with single_threaded(), torch.no_grad():
        model = ToyMLP.from_tensor_set(params, spec=spec)
        model.eval()
        return model(torch.from_numpy(x.copy())).numpy()


def predict(params, x, spec=None):
    # np.argmax picks the first maximum, i.e. ties go to the lower class index
    return np.argmax(logits(params, x, spec=spec), axis=1)


def features(params, x, spec=None):
    """
    Activations entering the final linear layer.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    with single_threaded(), torch.no_grad():
        model = ToyMLP.from_tensor_set(params, spec=spec)
        model.eval()
        return model.features(torch.from_numpy(x.copy())).numpy()


def feature_fn(params, spec=None):
    """
    Deterministic feature extractor bound to @params, as expected by build_query_index.
    """
    spec = ModelSpec.from_tensor_set(params) if spec is None else spec
    return lambda x: features(params, x, spec=spec)


def accuracy(predictions, labels):
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise UserError("cannot compute accuracy on an empty split")
    return float(np.mean(predictions == labels))


def evaluate(params, model_spec, split):
    """
    Fraction of @split whose argmax prediction equals the label.
    """
    if split.y is None:
        raise UserError("evaluation split has no labels")
    return accuracy(predict(params, split.x, spec=model_spec), split.y)
