"""The CRNN-biGRU-attention network with two output branches.

Six 3x3 conv layers (batch norm + ReLU each), max pooling after every conv
but the first: 5x2 once to bring the frame rate to 100 ms, then 1x2 four
times to shrink frequency to 2. The (T/5, 2, channels) map is flattened
channel-major into a feature sequence, encoded by a bidirectional GRU,
refined by single-head scaled dot-product self-attention (values stay
unprojected), and read out by two branches of two hidden dense layers each:
sigmoid activity scores per class and tanh (x, y, z) per class.

A scale_factor divides all widths for desk-scale runs; the defaults
reproduce the full-size architecture.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad

DEFAULT_CONV_FILTERS = (64, 64, 128, 128, 256, 256)
DEFAULT_POOL_KERNELS = ((5, 2), (1, 2), (1, 2), (1, 2), (1, 2))


@dataclass
class ModelConfig:
    num_classes: int = 14
    input_frames: int = 600
    freq_bins: int = 64
    in_channels: int = 7
    conv_filters: tuple = DEFAULT_CONV_FILTERS
    pool_kernels: tuple = DEFAULT_POOL_KERNELS
    gru_hidden: int = 256
    d_k: int = 64
    fc_width: int = 512
    dropout_conv: float = 0.5
    dropout_rnn: float = 0.1
    dropout_fc: float = 0.25
    scale_factor: int = 1

    def __post_init__(self):
        self.conv_filters = tuple(int(f) for f in self.conv_filters)
        self.pool_kernels = tuple((int(a), int(b)) for a, b in self.pool_kernels)
        if len(self.pool_kernels) != len(self.conv_filters) - 1:
            raise ValueError("need exactly one pool kernel per conv layer after the first")
        t_pool = int(np.prod([k[0] for k in self.pool_kernels]))
        f_pool = int(np.prod([k[1] for k in self.pool_kernels]))
        if self.input_frames % t_pool:
            raise ValueError(f"input_frames={self.input_frames} not divisible by "
                             f"temporal pooling {t_pool}")
        if self.freq_bins % f_pool:
            raise ValueError(f"freq_bins={self.freq_bins} not divisible by "
                             f"frequency pooling {f_pool}")
        if self.scale_factor < 1:
            raise ValueError("scale_factor must be >= 1")

    # widths after applying the scale factor
    @property
    def filters(self):
        return tuple(max(1, f // self.scale_factor) for f in self.conv_filters)

    @property
    def hidden(self):
        return max(1, self.gru_hidden // self.scale_factor)

    @property
    def dk(self):
        return max(8, self.d_k // self.scale_factor)

    @property
    def fc(self):
        return max(1, self.fc_width // self.scale_factor)

    @property
    def out_frames(self):
        return self.input_frames // int(np.prod([k[0] for k in self.pool_kernels]))

    @property
    def final_freq(self):
        return self.freq_bins // int(np.prod([k[1] for k in self.pool_kernels]))

    @property
    def rnn_input(self):
        return self.filters[-1] * self.final_freq

    def with_frames(self, frames):
        return replace(self, input_frames=frames)


def intermediate_shapes(cfg: ModelConfig):
    """Ordered (stage, shape) pairs for one batch item; pure arithmetic."""
    shapes = [("input", (cfg.input_frames, cfg.freq_bins, cfg.in_channels))]
    t, f = cfg.input_frames, cfg.freq_bins
    filters = cfg.filters
    shapes.append(("conv1", (t, f, filters[0])))
    for i in range(1, len(filters)):
        shapes.append((f"conv{i + 1}", (t, f, filters[i])))
        kt, kf = cfg.pool_kernels[i - 1]
        t, f = t // kt, f // kf
        shapes.append((f"pool{i}", (t, f, filters[i])))
    shapes.append(("reshape", (t, filters[-1] * f)))
    shapes.append(("bigru", (t, 2 * cfg.hidden)))
    shapes.append(("attention", (t, 2 * cfg.hidden)))
    shapes.append(("activity", (t, cfg.num_classes)))
    shapes.append(("doa", (t, cfg.num_classes, 3)))
    return shapes


@dataclass
class Predictions:
    """Post-processed per-clip outputs at the 100 ms frame rate."""

    activity: np.ndarray  # (T/5, Y) in [0, 1]
    doa: np.ndarray       # (T/5, Y, 3) in [-1, 1]


class SeldModel:
    """Holds parameters and batch-norm state; forward builds the graph."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = rng or np.random.default_rng(0)
        self.params = {}
        self.bn_states = {}
        self._conv_zero_bias = {}
        filters = cfg.filters
        in_ch = cfg.in_channels
        for i, out_ch in enumerate(filters):
            name = f"conv{i + 1}"
            self.params[f"{name}.kernel"] = ad.Tensor(
                ad.glorot_uniform((3, 3, in_ch, out_ch), rng, dtype, receptive_field=9),
                requires_grad=True)
            # conv bias is inert under the following batch norm; beta covers it
            self._conv_zero_bias[name] = ad.Tensor(np.zeros(out_ch, dtype=dtype))
            self.params[f"{name}.gamma"] = ad.Tensor(np.ones(out_ch, dtype=dtype),
                                                     requires_grad=True)
            self.params[f"{name}.beta"] = ad.Tensor(np.zeros(out_ch, dtype=dtype),
                                                    requires_grad=True)
            self.bn_states[name] = ad.BatchNormState(out_ch, dtype=dtype)
            in_ch = out_ch

        rnn_in = cfg.rnn_input
        for prefix in ("gru.fw.", "gru.bw."):
            self.params.update(ad.gru_params(rnn_in, cfg.hidden, rng, dtype=dtype,
                                             prefix=prefix))
        width = 2 * cfg.hidden
        self.params["attn.wq"] = ad.Tensor(ad.glorot_uniform((width, cfg.dk), rng, dtype),
                                           requires_grad=True)
        self.params["attn.wk"] = ad.Tensor(ad.glorot_uniform((width, cfg.dk), rng, dtype),
                                           requires_grad=True)

        def branch(name, out_dim):
            dims = [width, cfg.fc, cfg.fc, out_dim]
            for j in range(3):
                self.params[f"{name}.fc{j + 1}.w"] = ad.Tensor(
                    ad.glorot_uniform((dims[j], dims[j + 1]), rng, dtype), requires_grad=True)
                self.params[f"{name}.fc{j + 1}.b"] = ad.Tensor(
                    np.zeros(dims[j + 1], dtype=dtype), requires_grad=True)

        branch("sed", cfg.num_classes)
        branch("doa", 3 * cfg.num_classes)

    def conv_stack(self, x, train=False, rng=None):
        """Convolutional front half: (N, T, F, C) -> (N, T/5, rnn_input)."""
        cfg = self.cfg
        z = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=self.dtype))
        for i in range(len(cfg.filters)):
            name = f"conv{i + 1}"
            z = ad.conv2d(z, self.params[f"{name}.kernel"], self._conv_zero_bias[name])
            z = ad.batch_norm(z, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                              self.bn_states[name], train=train)
            z = ad.relu(z)
            if i >= 1:
                kt, kf = cfg.pool_kernels[i - 1]
                z = ad.max_pool2d(z, kt, kf)
                z = ad.dropout(z, cfg.dropout_conv, train, rng)
        n, t5, f_final, ch = z.data.shape
        # channel-major flatten of the (freq, channel) axes
        z = ad.transpose(z, (0, 1, 3, 2))
        return ad.reshape(z, (n, t5, ch * f_final))

    def forward(self, x, mode="infer", rng=None):
        """Run the network on (N, T, F, C); returns (activity, doa) tensors
        shaped (N, T/5, Y) and (N, T/5, Y, 3)."""
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        train = mode == "train"
        if train and rng is None:
            raise ValueError("train mode needs an rng for dropout")
        cfg = self.cfg
        data = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
        if data.ndim != 4 or data.shape[2] != cfg.freq_bins or data.shape[3] != cfg.in_channels:
            raise ValueError(f"expected (N, T, {cfg.freq_bins}, {cfg.in_channels}) input, "
                             f"got {data.shape}")
        if data.shape[1] % int(np.prod([k[0] for k in cfg.pool_kernels])):
            raise ValueError(f"input frame count {data.shape[1]} not divisible by "
                             "the temporal pooling factor")

        seq = self.conv_stack(x, train=train, rng=rng)
        seq = ad.gru_bidirectional(seq, {k.removeprefix("gru."): v
                                         for k, v in self.params.items()
                                         if k.startswith("gru.")})
        seq = ad.dropout(seq, cfg.dropout_rnn, train, rng)
        seq = ad.self_attention(seq, self.params["attn.wq"], self.params["attn.wk"], cfg.dk)

        def branch(name, z):
            z = ad.relu(ad.dense(z, self.params[f"{name}.fc1.w"], self.params[f"{name}.fc1.b"]))
            z = ad.dropout(z, cfg.dropout_fc, train, rng)
            z = ad.relu(ad.dense(z, self.params[f"{name}.fc2.w"], self.params[f"{name}.fc2.b"]))
            z = ad.dropout(z, cfg.dropout_fc, train, rng)
            return ad.dense(z, self.params[f"{name}.fc3.w"], self.params[f"{name}.fc3.b"])

        activity = ad.sigmoid(branch("sed", seq))
        doa = ad.tanh(branch("doa", seq))
        n, t5 = doa.data.shape[:2]
        doa = ad.reshape(doa, (n, t5, cfg.num_classes, 3))  # Y consecutive (x,y,z) triples
        return activity, doa

    def snapshot(self):
        """Copies of all parameter arrays and batch-norm states."""
        params = {k: p.data.copy() for k, p in self.params.items()}
        bn = {name: (st.mean.copy(), st.var.copy(), st.count)
              for name, st in self.bn_states.items()}
        return params, bn

    def restore(self, snapshot):
        params, bn = snapshot
        for k, arr in params.items():
            self.params[k].data = arr.copy()
        for name, (mean, var, count) in bn.items():
            st = self.bn_states[name]
            st.mean = mean.copy()
            st.var = var.copy()
            st.count = count


# ---------------------------------------------------------------------------
# flat key=value config sidecar

_LIST_FIELDS = {"conv_filters", "pool_kernels"}


def config_to_text(cfg: ModelConfig, extra=None):
    lines = []
    for name in ("num_classes", "input_frames", "freq_bins", "in_channels",
                 "gru_hidden", "d_k", "fc_width", "scale_factor"):
        lines.append(f"{name}={getattr(cfg, name)}")
    for name in ("dropout_conv", "dropout_rnn", "dropout_fc"):
        lines.append(f"{name}={getattr(cfg, name)!r}")
    lines.append("conv_filters=" + ",".join(str(f) for f in cfg.conv_filters))
    lines.append("pool_kernels=" + ",".join(f"{a}x{b}" for a, b in cfg.pool_kernels))
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text):
    """Parse the sidecar; returns (ModelConfig, dict of unrecognized keys)."""
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    kwargs = {}
    extra = {}
    int_fields = {"num_classes", "input_frames", "freq_bins", "in_channels",
                  "gru_hidden", "d_k", "fc_width", "scale_factor"}
    float_fields = {"dropout_conv", "dropout_rnn", "dropout_fc"}
    for key, raw in values.items():
        if key in int_fields:
            kwargs[key] = int(raw)
        elif key in float_fields:
            kwargs[key] = float(raw)
        elif key == "conv_filters":
            kwargs[key] = tuple(int(v) for v in raw.split(","))
        elif key == "pool_kernels":
            kwargs[key] = tuple(tuple(int(v) for v in item.split("x"))
                                for item in raw.split(","))
        else:
            extra[key] = raw
    return ModelConfig(**kwargs), extra
