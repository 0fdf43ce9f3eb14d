"""Layers, the partitioned network (front / optional encoder / head), model
builders, the Adam optimizer, and checkpoint serialization.

The network is a plain sequential stack split into two frozen-able halves
with an optional trainable encoder block in between. Backward passes are
hand-written per layer; there is no general autodiff tape.
"""

import json

import numpy as np

from .seeding import derive_rng
from .tensor_core import check_finite

BLOCK_NAMES = ("n1", "n2", "encoder")


class NetworkError(Exception):
    pass


class EncoderAlreadyPresent(NetworkError):
    pass


class EncoderMissing(NetworkError):
    pass


class NonFiniteGradient(NetworkError):
    pass


class Parameter:
    """A trainable array and its gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class Layer:
    kind = None

    def __init__(self):
        self.frozen = False

    def params(self):
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def descriptor(self):
        d = {"kind": self.kind, "frozen": self.frozen}
        d.update(self._extra_descriptor())
        return d

    def _extra_descriptor(self):
        return {}


class Linear(Layer):
    """y = x @ W.T + b with W of shape (out, in).

    Inputs with more than two axes are flattened per example and restored
    on the backward pass.
    """

    kind = "linear"

    def __init__(self, in_dim, out_dim, rng=None):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            w = np.zeros((out_dim, in_dim))
        else:
            bound = np.sqrt(1.0 / in_dim)
            w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_dim))
        self._x = None
        self._in_shape = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._in_shape = x.shape
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dout):
        self.weight.grad += dout.T @ self._x
        self.bias.grad += dout.sum(axis=0)
        dx = dout @ self.weight.value
        return dx.reshape(self._in_shape)

    def _extra_descriptor(self):
        return {"in_dim": self.in_dim, "out_dim": self.out_dim}


class Conv2d(Layer):
    """Zero-padded cross-correlation layer over (B, C, H, W) batches."""

    kind = "conv"

    def __init__(self, c_in, c_out, kh, kw, stride=1, padding=0, rng=None):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kh, self.kw = kh, kw
        self.stride, self.padding = stride, padding
        if rng is None:
            w = np.zeros((c_out, c_in, kh, kw))
        else:
            bound = np.sqrt(1.0 / (c_in * kh * kw))
            w = rng.uniform(-bound, bound, size=(c_out, c_in, kh, kw))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out))
        self._cols = None
        self._x_shape = None
        self._out_hw = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        from .tensor_core import im2col

        self._x_shape = x.shape
        cols, h_out, w_out = im2col(x, self.kh, self.kw, self.stride, self.padding)
        self._cols = cols
        self._out_hw = (h_out, w_out)
        out = cols @ self.weight.value.reshape(self.c_out, -1).T
        out = out.transpose(0, 2, 1).reshape(x.shape[0], self.c_out, h_out, w_out)
        return out + self.bias.value[None, :, None, None]

    def backward(self, dout):
        from .tensor_core import col2im

        b = dout.shape[0]
        h_out, w_out = self._out_hw
        dmat = dout.transpose(0, 2, 3, 1).reshape(b, h_out * w_out, self.c_out)
        dw = np.tensordot(dmat, self._cols, axes=([0, 1], [0, 1]))
        self.weight.grad += dw.reshape(self.weight.value.shape)
        self.bias.grad += dout.sum(axis=(0, 2, 3))
        dcols = dmat @ self.weight.value.reshape(self.c_out, -1)
        return col2im(dcols, self._x_shape, self.kh, self.kw, self.stride, self.padding)

    def _extra_descriptor(self):
        return {
            "c_in": self.c_in, "c_out": self.c_out,
            "kh": self.kh, "kw": self.kw,
            "stride": self.stride, "padding": self.padding,
        }


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        super().__init__()
        self._in_shape = None

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._in_shape)


def _layer_from_descriptor(d):
    kind = d["kind"]
    if kind == "linear":
        layer = Linear(d["in_dim"], d["out_dim"])
    elif kind == "conv":
        layer = Conv2d(d["c_in"], d["c_out"], d["kh"], d["kw"], d["stride"], d["padding"])
    elif kind == "relu":
        layer = ReLU()
    elif kind == "flatten":
        layer = Flatten()
    else:
        raise NetworkError(f"unknown layer kind {kind!r}")
    layer.frozen = bool(d["frozen"])
    return layer


class Network:
    """Sequential classifier split into front (n1) and head (n2) blocks with
    an optional encoder block inserted at the split.

    The encoder can be bypassed at forward time, which reproduces the
    encoder-less network exactly.
    """

    def __init__(self, arch, n1, n2, split_shape, encoder=None):
        self.arch = arch
        self.n1 = list(n1)
        self.n2 = list(n2)
        self.encoder = list(encoder) if encoder is not None else None
        self.split_shape = tuple(split_shape)

    @property
    def split_dim(self):
        return int(np.prod(self.split_shape))

    def blocks(self):
        out = {"n1": self.n1, "n2": self.n2}
        if self.encoder is not None:
            out["encoder"] = self.encoder
        return out

    def layers(self, use_encoder=False):
        enc = self.encoder if use_encoder else []
        return self.n1 + list(enc or []) + self.n2

    def _prepare(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if isinstance(self.n1[0], Linear) and batch.ndim > 2:
            batch = batch.reshape(batch.shape[0], -1)
        return batch

    def forward(self, batch, use_encoder=False):
        """Run the stack; returns (split_features, logits).

        split_features is the value entering n2: f(x) without the encoder,
        h(f(x)) with it.
        """
        if use_encoder and self.encoder is None:
            raise EncoderMissing("forward(use_encoder=True) on a network without an encoder")
        x = self._prepare(batch)
        for layer in self.n1:
            x = layer.forward(x)
        if use_encoder:
            for layer in self.encoder:
                x = layer.forward(x)
        split = x
        for layer in self.n2:
            x = layer.forward(x)
        check_finite(x, "network forward")
        return split, x

    def forward_features(self, batch):
        """n1 output only (the feature map f)."""
        x = self._prepare(batch)
        for layer in self.n1:
            x = layer.forward(x)
        return x

    def backward(self, dlogits, use_encoder=False, split_grad=None, into_n1=True):
        """Backpropagate from the logits, accumulating parameter gradients.

        `split_grad` is added to the gradient arriving at the n2 input (used
        for feature-alignment terms acting on the split features). With
        `into_n1=False` the walk stops after the encoder (or at the split),
        which is all that phase-2 training needs.
        """
        d = dlogits
        for layer in reversed(self.n2):
            d = layer.backward(d)
        if split_grad is not None:
            d = d + split_grad.reshape(d.shape)
        if use_encoder:
            if self.encoder is None:
                raise EncoderMissing("backward(use_encoder=True) without an encoder")
            for layer in reversed(self.encoder):
                d = layer.backward(d)
        if into_n1:
            for layer in reversed(self.n1):
                d = layer.backward(d)
        return d

    def zero_grad(self):
        for layer in self.layers(use_encoder=self.encoder is not None):
            for p in layer.params():
                p.grad.fill(0.0)

    def all_params(self, blocks=BLOCK_NAMES):
        out = []
        table = self.blocks()
        for name in blocks:
            for layer in table.get(name, []):
                out.extend(layer.params())
        return out

    def param_bytes(self, blocks=("n1", "n2")):
        """Concatenated raw parameter bytes, for freeze-integrity checksums."""
        return b"".join(p.value.tobytes() for p in self.all_params(blocks))


def build_fcn(seed):
    """Four-Linear-layer 1024->10 classifier with no activations.

    Front: 1024->512->256, head: 256->128->10; the split feature width
    is 256. Same seed gives bit-identical parameters.
    """
    rng = derive_rng(seed, "build_fcn")
    n1 = [Linear(1024, 512, rng), Linear(512, 256, rng)]
    n2 = [Linear(256, 128, rng), Linear(128, 10, rng)]
    return Network("fcn", n1, n2, split_shape=(256,))


def build_cnn(seed):
    """Five-conv + one-Linear classifier for 1x32x32 inputs, ReLU throughout.

    Front: conv(1->16, s1) + conv(16->32, s2) giving 32x16x16 split features;
    head: three more convs down to 64x8x8, flatten, Linear to 10 classes.
    """
    rng = derive_rng(seed, "build_cnn")
    n1 = [
        Conv2d(1, 16, 3, 3, stride=1, padding=1, rng=rng), ReLU(),
        Conv2d(16, 32, 3, 3, stride=2, padding=1, rng=rng), ReLU(),
    ]
    n2 = [
        Conv2d(32, 32, 3, 3, stride=1, padding=1, rng=rng), ReLU(),
        Conv2d(32, 64, 3, 3, stride=2, padding=1, rng=rng), ReLU(),
        Conv2d(64, 64, 3, 3, stride=1, padding=1, rng=rng), ReLU(),
        Flatten(),
        Linear(64 * 8 * 8, 10, rng),
    ]
    return Network("cnn", n1, n2, split_shape=(32, 16, 16))


def build_encoder(network, seed, noise_scale=1e-2):
    """Create and attach the trainable encoder block at the network split.

    Initialization is near-identity (identity matrix / centered delta kernel
    plus seeded noise), so inserting the encoder barely perturbs the
    pretrained behaviour at the start of adaptation.
    """
    if network.encoder is not None:
        raise EncoderAlreadyPresent("network already has an encoder block")
    rng = derive_rng(seed, "build_encoder", network.arch)
    layers = []
    if network.arch == "fcn":
        k = network.split_dim
        for _ in range(2):
            lin = Linear(k, k)
            lin.weight.value[:] = np.eye(k) + noise_scale * rng.standard_normal((k, k))
            layers.append(lin)
    else:
        c = network.split_shape[0]
        for i in range(2):
            conv = Conv2d(c, c, 3, 3, stride=1, padding=1)
            w = noise_scale * rng.standard_normal((c, c, 3, 3))
            w[np.arange(c), np.arange(c), 1, 1] += 1.0
            conv.weight.value[:] = w
            layers.append(conv)
            layers.append(ReLU())
    network.encoder = layers
    return layers


def set_frozen(network, blocks, frozen):
    """Set the freeze flag on every layer of the named blocks."""
    for name in blocks:
        if name not in BLOCK_NAMES:
            raise NetworkError(f"unknown block {name!r}")
        if name == "encoder" and network.encoder is None:
            raise EncoderMissing("cannot freeze encoder: none attached")
        for layer in network.blocks()[name]:
            layer.frozen = bool(frozen)
    return network


class Adam:
    """Adam with decoupled weight decay over the layers it is given.

    Frozen layers are skipped at step time, so their parameters stay
    bit-identical no matter how many steps run. lr=0 is the identity.
    """

    def __init__(self, layers, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 weight_decay=0.0):
        self.layers = list(layers)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.weight_decay = weight_decay
        self._state = {}

    def zero_grad(self):
        for layer in self.layers:
            for p in layer.params():
                p.grad.fill(0.0)

    def step(self):
        for layer in self.layers:
            if layer.frozen:
                continue
            for p in layer.params():
                g = p.grad
                if not np.all(np.isfinite(g)):
                    raise NonFiniteGradient("non-finite gradient in Adam step")
                state = self._state.get(id(p))
                if state is None:
                    state = {"m": np.zeros_like(p.value), "v": np.zeros_like(p.value), "t": 0}
                    self._state[id(p)] = state
                state["t"] += 1
                t = state["t"]
                state["m"] = self.beta1 * state["m"] + (1.0 - self.beta1) * g
                state["v"] = self.beta2 * state["v"] + (1.0 - self.beta2) * g * g
                m_hat = state["m"] / (1.0 - self.beta1 ** t)
                v_hat = state["v"] / (1.0 - self.beta2 ** t)
                p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)
                if self.weight_decay:
                    p.value -= self.lr * self.weight_decay * p.value


def save_checkpoint(network, path, meta=None):
    """Serialize structure, parameters and metadata; round-trips bit-exactly."""
    structure = {
        "arch": network.arch,
        "split_shape": list(network.split_shape),
        "blocks": {name: [l.descriptor() for l in layers]
                   for name, layers in network.blocks().items()},
        "meta": meta or {},
    }
    arrays = {"structure": np.array(json.dumps(structure, sort_keys=True))}
    for name, layers in network.blocks().items():
        for i, layer in enumerate(layers):
            for j, p in enumerate(layer.params()):
                arrays[f"{name}.{i}.{j}"] = p.value
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Rebuild a Network (and its metadata) from `save_checkpoint` output."""
    with np.load(path, allow_pickle=False) as data:
        structure = json.loads(str(data["structure"]))
        blocks = {}
        for name, descriptors in structure["blocks"].items():
            layers = [_layer_from_descriptor(d) for d in descriptors]
            for i, layer in enumerate(layers):
                for j, p in enumerate(layer.params()):
                    stored = data[f"{name}.{i}.{j}"]
                    if stored.shape != p.value.shape:
                        raise NetworkError(
                            f"checkpoint array {name}.{i}.{j} has shape {stored.shape}, "
                            f"expected {p.value.shape}")
                    p.value[:] = stored
            blocks[name] = layers
    net = Network(structure["arch"], blocks["n1"], blocks["n2"],
                  split_shape=structure["split_shape"],
                  encoder=blocks.get("encoder"))
    return net, structure["meta"]
