"""End-to-end operator pipelines: PCA encodings around a latent MLP.

Five variants share one skeleton. "global" projects whole fields on both
sides; "l2g" encodes inputs patchwise but decodes a global output basis;
"l2l" runs patch banks on both sides and assembles the decoded patches by
mosaic, by window blending (overlapping strides), or through a trailing
convolutional refiner that smooths the mosaic.

A fitted model is immutable and its prediction path allocates no shared
state, so concurrent predict calls are safe.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from time import perf_counter

import numpy as np

from .errors import (
    ChecksumError,
    DataFormatError,
    MagicError,
    ParameterError,
    PatchPcaError,
    TruncationError,
    VersionError,
)
from .field_data import Dataset, as_field
from .metrics import report_from_fields
from .neuralnet import (
    ConvLayer,
    DenseLayer,
    Network,
    ReluLayer,
    TrainConfig,
    make_cnn,
    make_mlp,
    train,
)
from .patching import hanning_window, make_layout
from .pca import (
    PatchBasisBank,
    PcaBasis,
    decode_fields,
    encode_field,
    encode_fields,
    field_side_matrix,
    fit_patch_bank,
    fit_pca,
    latent_dim,
)

MODEL_MAGIC = b"PPCM"
MODEL_VERSION = 1

KINDS = ("global", "l2g", "l2l")


@dataclass(frozen=True)
class RefinerSpec:
    """Trailing CNN that maps a mosaic reconstruction to a smooth field."""

    channels: tuple = (16, 16)
    kernel_size: int = 5
    train: TrainConfig = TrainConfig(batch_size=8)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or any(c < 1 for c in self.channels):
            raise ParameterError("refiner channels must be positive")


@dataclass(frozen=True)
class VariantSpec:
    """Full recipe for one pipeline variant.

    patch_size/stride describe both sides for "l2l" and the input side for
    "l2g"; they are ignored for "global". A missing stride means
    non-overlapping patches (stride = patch size). Latent widths per side
    come from a retained-variance target unless a fixed k overrides it.
    """

    kind: str
    patch_size: int = 16
    stride: int | None = None
    blend: bool = False
    refiner: RefinerSpec | None = None
    input_variance: float = 0.999
    input_k: int | None = None
    output_variance: float = 0.9999
    output_k: int | None = None
    hidden: tuple = (256, 256)
    train: TrainConfig = TrainConfig()
    split_seed: int = 0
    test_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in KINDS:
            raise ParameterError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.patch_size < 1:
            raise ParameterError("patch_size must be >= 1")
        if self.stride is not None and not 1 <= self.stride <= self.patch_size:
            raise ParameterError("stride must lie in [1, patch_size]")
        if self.blend and (self.kind != "l2l" or not self.overlapping):
            raise ParameterError(
                "blend requires the l2l kind with stride < patch_size"
            )
        if self.refiner is not None and (self.kind != "l2l" or self.overlapping or self.blend):
            raise ParameterError(
                "a refiner requires the l2l kind with mosaic assembly"
            )
        if not 0.0 < self.input_variance <= 1.0 or not 0.0 < self.output_variance <= 1.0:
            raise ParameterError("variance targets must lie in (0, 1]")
        if (self.input_k is not None and self.input_k < 1) or (
            self.output_k is not None and self.output_k < 1
        ):
            raise ParameterError("fixed latent widths must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ParameterError("hidden widths must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ParameterError("test_fraction must lie in (0, 1)")

    @property
    def effective_stride(self):
        return self.patch_size if self.stride is None else self.stride

    @property
    def overlapping(self):
        return self.effective_stride < self.patch_size


@dataclass
class PipelineModel:
    """A fitted variant: PCA sides, latent operator, optional refiner."""

    spec: VariantSpec
    resolution: int
    input_side: object  # PcaBasis | PatchBasisBank
    output_side: object  # PcaBasis | PatchBasisBank
    operator: Network
    refiner: Network | None = None
    meta: dict = dc_field(default_factory=dict)

    @property
    def latent_in(self):
        return latent_dim(self.input_side)

    @property
    def latent_out(self):
        return latent_dim(self.output_side)

    @property
    def output_layout(self):
        if isinstance(self.output_side, PatchBasisBank):
            return self.output_side.layout
        return None

    def assembly_window(self):
        """Patch assembly weights: Hanning blend, plain average, or mosaic.

        Overlapping output patches without the blend flag are averaged with
        uniform weights; non-overlapping layouts stitch directly.
        """
        if self.spec.blend:
            return hanning_window(self.spec.patch_size)
        if self.spec.kind == "l2l" and self.spec.overlapping:
            return np.ones((self.spec.patch_size, self.spec.patch_size))
        return None


def split_indices(sample_count, spec):
    """Deterministic train/test index split for a dataset of this size."""
    if sample_count < 2:
        raise ParameterError("need at least 2 samples to split train/test")
    rng = np.random.default_rng([spec.split_seed, sample_count])
    perm = rng.permutation(sample_count)
    n_test = max(1, int(round(sample_count * spec.test_fraction)))
    if n_test >= sample_count:
        raise ParameterError("test fraction leaves no training samples")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _stage(label, fn):
    """Run one fit stage, tagging any pipeline error with the stage name."""
    start = perf_counter()
    try:
        result = fn()
    except PatchPcaError as err:
        err.stage = label
        raise
    return result, perf_counter() - start


def _fit_side(fields, kind, side, spec, threads):
    if kind == "global":
        return fit_pca(
            field_side_matrix(fields),
            variance_target=spec.input_variance if side == "in" else spec.output_variance,
            fixed_k=spec.input_k if side == "in" else spec.output_k,
        )
    layout = make_layout(fields.shape[1], spec.patch_size, spec.effective_stride)
    return fit_patch_bank(
        fields,
        layout,
        variance_target=spec.input_variance if side == "in" else spec.output_variance,
        fixed_k=spec.input_k if side == "in" else spec.output_k,
        threads=threads,
    )


def _history_dict(history):
    # wall-clock epoch timings stay out: serialized metadata must be
    # byte-reproducible across identical runs
    return {
        "train_loss": [float(v) for v in history.train_loss],
        "val_loss": [float(v) for v in history.val_loss],
        "learning_rate": [float(v) for v in history.learning_rate],
        "best_epoch": int(history.best_epoch),
    }


def _code_scales(codes):
    """Per-dimension standard deviations, with zero-variance dims left at 1."""
    scales = np.std(codes, axis=0)
    return np.where(scales > 0.0, scales, 1.0)


def absorb_latent_scales(network, in_scales, out_scales):
    """Fold training-time code scales into the affine end layers.

    A network fitted on x/in_scales -> y/out_scales becomes, after this
    rescaling of its first and last dense layers, the same map expressed on
    raw codes, so inference needs no knowledge of the scales.
    """
    first, last = network.layers[0], network.layers[-1]
    first.weights /= np.asarray(in_scales)[None, :]
    last.weights *= np.asarray(out_scales)[:, None]
    last.bias *= np.asarray(out_scales)


def _train_on_standardized_codes(operator, x, y, config):
    """Train on unit-scale codes, then rescale the operator to raw codes.

    Retained PCA coordinates spread over many orders of magnitude; training
    on raw codes stalls far above the attainable floor because the loss
    surface is dominated by the few widest dimensions. Standardizing both
    sides conditions the problem and is exactly undone afterwards.
    """
    sx = _code_scales(x)
    sy = _code_scales(y)
    trained, history = train(operator, x / sx, y / sy, config)
    absorb_latent_scales(trained, sx, sy)
    return trained, history


def fit_pipeline(dataset, spec, threads=1):
    """Fit one variant on the dataset's training split.

    Returns (model, timing) where timing maps each stage (input_pca,
    output_pca, extraction, training, refiner_training) to seconds and
    "total" to their sum.
    """
    if not isinstance(dataset, Dataset):
        raise ParameterError("fit_pipeline expects a Dataset")
    train_idx, test_idx = split_indices(dataset.n, spec)
    f_train = dataset.f[train_idx].astype(np.float64)
    u_train = dataset.u[train_idx].astype(np.float64)
    d = dataset.resolution

    in_kind = "global" if spec.kind == "global" else "patch"
    out_kind = "patch" if spec.kind == "l2l" else "global"
    input_side, t_in = _stage(
        "input_pca", lambda: _fit_side(f_train, in_kind, "in", spec, threads)
    )
    output_side, t_out = _stage(
        "output_pca", lambda: _fit_side(u_train, out_kind, "out", spec, threads)
    )

    def extract():
        return encode_fields(input_side, f_train), encode_fields(output_side, u_train)

    (x_latent, y_latent), t_extract = _stage("extraction", extract)

    def run_training():
        operator = make_mlp(
            (x_latent.shape[1], *spec.hidden, y_latent.shape[1]), seed=spec.train.seed
        )
        return _train_on_standardized_codes(operator, x_latent, y_latent, spec.train)

    (operator, history), t_train = _stage("training", run_training)

    refiner = None
    refiner_history = None
    t_refine = 0.0
    if spec.refiner is not None:

        def run_refiner():
            z = operator.infer(x_latent)
            mosaic = decode_fields(output_side, z)
            cnn = make_cnn(
                (1, *spec.refiner.channels, 1),
                spec.refiner.kernel_size,
                seed=spec.refiner.train.seed,
            )
            # solution fields sit far below unit scale, which starves Adam of
            # gradient signal; train at unit scale and fold the two scalars
            # back into the end convolutions (same trick as the code scales)
            s_in = float(np.std(mosaic)) or 1.0
            s_out = float(np.std(u_train)) or 1.0
            trained, hist = train(
                cnn, mosaic[:, None] / s_in, u_train[:, None] / s_out,
                spec.refiner.train,
            )
            trained.layers[0].weights /= s_in
            trained.layers[-1].weights *= s_out
            trained.layers[-1].bias *= s_out
            return trained, hist

        (refiner, refiner_history), t_refine = _stage("refiner_training", run_refiner)

    timing = {
        "input_pca": t_in,
        "output_pca": t_out,
        "extraction": t_extract,
        "training": t_train,
        "refiner_training": t_refine,
    }
    timing["total"] = sum(timing.values())

    meta = {
        "resolution": d,
        "sample_count": int(dataset.n),
        "train_count": int(len(train_idx)),
        "test_count": int(len(test_idx)),
        "latent_in": int(x_latent.shape[1]),
        "latent_out": int(y_latent.shape[1]),
        "history": _history_dict(history),
        "refiner_history": _history_dict(refiner_history) if refiner_history else None,
    }
    model = PipelineModel(
        spec=spec,
        resolution=d,
        input_side=input_side,
        output_side=output_side,
        operator=operator,
        refiner=refiner,
        meta=meta,
    )
    return model, timing


def predict_latents(model, f):
    """Latent output vector for one coefficient field.

    Identical across mosaic/blend/refiner variants sharing a trained PCA
    path: assembly choices act strictly after decoding.
    """
    f = as_field(f)
    if f.shape[0] != model.resolution:
        raise ParameterError(
            f"field resolution {f.shape[0]} does not match model {model.resolution}"
        )
    x = encode_field(model.input_side, f)
    return model.operator.infer(x[None])[0]


_REFINE_CHUNK = 16  # fields per refiner batch, bounds conv buffer memory


def predict_fields(model, fields):
    """Batch prediction: (m, D, D) coefficient fields to solution fields."""
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 3 or fields.shape[1:] != (model.resolution, model.resolution):
        raise ParameterError(
            f"expected (m, {model.resolution}, {model.resolution}) fields, got {fields.shape}"
        )
    x = encode_fields(model.input_side, fields)
    z = model.operator.infer(x)
    out = decode_fields(model.output_side, z, window=model.assembly_window())
    if model.refiner is not None:
        refined = np.empty_like(out)
        for start in range(0, len(out), _REFINE_CHUNK):
            stop = start + _REFINE_CHUNK
            refined[start:stop] = model.refiner.infer(out[start:stop, None])[:, 0]
        out = refined
    return out


def predict(model, f):
    """Predict the solution field for one coefficient field."""
    f = as_field(f)
    if f.shape[0] != model.resolution:
        raise ParameterError(
            f"field resolution {f.shape[0]} does not match model {model.resolution}"
        )
    return predict_fields(model, f[None])[0]


def evaluate(model, dataset, split="test", threads=1, pdf_bins=64, ssim_window=7):
    """Metrics report for the model on one split of the dataset.

    The split is recomputed from the spec's seed, so evaluating against the
    dataset used for fitting reproduces the original partition. Returns
    (report, extras) per the metrics module.
    """
    if split not in ("test", "train"):
        raise ParameterError(f"split must be 'test' or 'train', got {split!r}")
    if not isinstance(dataset, Dataset):
        raise ParameterError("evaluate expects a Dataset")
    if dataset.resolution != model.resolution:
        raise ParameterError(
            f"dataset resolution {dataset.resolution} does not match model {model.resolution}"
        )
    train_idx, test_idx = split_indices(dataset.n, model.spec)
    idx = train_idx if split == "train" else test_idx
    if len(idx) == 0:
        raise ParameterError(f"{split} split is empty")
    true = dataset.u[idx].astype(np.float64)
    preds = predict_fields(model, dataset.f[idx].astype(np.float64))
    return report_from_fields(
        true,
        preds,
        pdf_bins=pdf_bins,
        threads=threads,
        in_sample=(split == "train"),
        ssim_window=ssim_window,
    )


# ---------------------------------------------------------------------------
# Serialization: "PPCM" container, named sections, per-section CRC32.


def _spec_to_json(spec):
    payload = asdict(spec)
    payload["hidden"] = list(spec.hidden)
    if spec.refiner is not None:
        payload["refiner"]["channels"] = list(spec.refiner.channels)
    return json.dumps(payload, sort_keys=True).encode()


def _spec_from_json(payload):
    raw = json.loads(payload.decode())
    try:
        if raw.get("refiner") is not None:
            ref = raw["refiner"]
            raw["refiner"] = RefinerSpec(
                channels=tuple(ref["channels"]),
                kernel_size=ref["kernel_size"],
                train=TrainConfig(**ref["train"]),
            )
        raw["train"] = TrainConfig(**raw["train"])
        raw["hidden"] = tuple(raw["hidden"])
        return VariantSpec(**raw)
    except (KeyError, TypeError) as err:
        raise DataFormatError(f"malformed variant spec section: {err}") from err


def _pack_array(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _basis_bytes(basis):
    head = struct.pack("<IId", basis.dim, basis.k, basis.variance_ratio_retained)
    return head + _pack_array(basis.mean) + _pack_array(basis.singular_values) + _pack_array(
        basis.components
    )


class _Cursor:
    """Sequential reader that converts short reads into truncation errors."""

    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncationError(f"model file truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _basis_from(cur):
    d, k, ratio = cur.unpack("<IId", "basis header")
    mean = np.frombuffer(cur.take(8 * d, "basis mean"), dtype="<f8").copy()
    singular = np.frombuffer(cur.take(8 * k, "basis singular values"), dtype="<f8").copy()
    components = (
        np.frombuffer(cur.take(8 * k * d, "basis components"), dtype="<f8")
        .reshape(k, d)
        .copy()
    )
    return PcaBasis(
        mean=mean,
        components=components,
        singular_values=singular,
        variance_ratio_retained=ratio,
    )


def _side_bytes(side):
    if isinstance(side, PcaBasis):
        return b"\x00" + _basis_bytes(side)
    out = [
        b"\x01",
        struct.pack(
            "<IIII",
            side.layout.resolution,
            side.layout.patch_size,
            side.layout.stride,
            side.layout.n_patches,
        ),
    ]
    out.extend(_basis_bytes(b) for b in side.bases)
    return b"".join(out)


def _side_from(payload, section):
    cur = _Cursor(payload)
    (tag,) = cur.unpack("<B", "side tag")
    if tag == 0:
        return _basis_from(cur)
    if tag != 1:
        raise DataFormatError(f"unknown side tag {tag} in section {section!r}")
    d, p, s, n_patches = cur.unpack("<IIII", "bank header")
    layout = make_layout(d, p, s)
    if layout.n_patches != n_patches:
        raise DataFormatError(
            f"bank in section {section!r} declares {n_patches} patches, layout has {layout.n_patches}"
        )
    bases = tuple(_basis_from(cur) for _ in range(n_patches))
    return PatchBasisBank(layout=layout, bases=bases)


_DENSE, _RELU, _CONV = 0, 1, 2


def _network_bytes(net):
    parts = [struct.pack("<H", len(net.layers))]
    for layer in net.layers:
        if isinstance(layer, DenseLayer):
            parts.append(struct.pack("<BII", _DENSE, layer.in_dim, layer.out_dim))
            parts.append(_pack_array(layer.weights))
            parts.append(_pack_array(layer.bias))
        elif isinstance(layer, ReluLayer):
            parts.append(struct.pack("<B", _RELU))
        elif isinstance(layer, ConvLayer):
            parts.append(
                struct.pack(
                    "<BIII", _CONV, layer.in_channels, layer.out_channels, layer.kernel_size
                )
            )
            parts.append(_pack_array(layer.weights))
            parts.append(_pack_array(layer.bias))
        else:
            raise DataFormatError(f"cannot serialize layer type {type(layer).__name__}")
    return b"".join(parts)


def _network_from(payload, section):
    cur = _Cursor(payload)
    (n_layers,) = cur.unpack("<H", "layer count")
    layers = []
    for _ in range(n_layers):
        (kind,) = cur.unpack("<B", "layer kind")
        if kind == _RELU:
            layers.append(ReluLayer())
        elif kind == _DENSE:
            in_dim, out_dim = cur.unpack("<II", "dense dims")
            layer = DenseLayer(in_dim, out_dim)
            layer.weights[...] = np.frombuffer(
                cur.take(8 * out_dim * in_dim, "dense weights"), dtype="<f8"
            ).reshape(out_dim, in_dim)
            layer.bias[...] = np.frombuffer(cur.take(8 * out_dim, "dense bias"), dtype="<f8")
            layers.append(layer)
        elif kind == _CONV:
            in_ch, out_ch, k = cur.unpack("<III", "conv dims")
            layer = ConvLayer(in_ch, out_ch, k)
            layer.weights[...] = np.frombuffer(
                cur.take(8 * out_ch * in_ch * k * k, "conv weights"), dtype="<f8"
            ).reshape(out_ch, in_ch, k, k)
            layer.bias[...] = np.frombuffer(cur.take(8 * out_ch, "conv bias"), dtype="<f8")
            layers.append(layer)
        else:
            raise DataFormatError(f"unknown layer kind {kind} in section {section!r}")
    return Network(layers)


def save_model(model, path):
    """Write the fitted pipeline to a sectioned, checksummed binary file."""
    sections = [
        ("spec", _spec_to_json(model.spec)),
        ("meta", json.dumps(model.meta, sort_keys=True).encode()),
        ("input_side", _side_bytes(model.input_side)),
        ("output_side", _side_bytes(model.output_side)),
        ("operator", _network_bytes(model.operator)),
    ]
    if model.refiner is not None:
        sections.append(("refiner", _network_bytes(model.refiner)))

    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<HH", MODEL_VERSION, len(sections)))
    for name, payload in sections:
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
        buf.write(struct.pack("<I", zlib.crc32(payload)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())


def load_model(path):
    """Read a saved pipeline, verifying magic, version, and section checksums."""
    data = Path(path).read_bytes()
    cur = _Cursor(data)
    magic = bytes(cur.take(4, "magic"))
    if magic != MODEL_MAGIC:
        raise MagicError(MODEL_MAGIC, magic)
    version, n_sections = cur.unpack("<HH", "version header")
    if version > MODEL_VERSION:
        raise VersionError(version, MODEL_VERSION)

    payloads = {}
    for _ in range(n_sections):
        (name_len,) = cur.unpack("<H", "section name length")
        name = bytes(cur.take(name_len, "section name")).decode()
        (size,) = cur.unpack("<Q", f"section {name!r} length")
        payload = bytes(cur.take(size, f"section {name!r} payload"))
        (stored_crc,) = cur.unpack("<I", f"section {name!r} checksum")
        actual_crc = zlib.crc32(payload)
        if actual_crc != stored_crc:
            raise ChecksumError(name, stored_crc, actual_crc)
        payloads[name] = payload

    required = ("spec", "meta", "input_side", "output_side", "operator")
    missing = [name for name in required if name not in payloads]
    if missing:
        raise DataFormatError(f"model file is missing sections: {missing}")

    spec = _spec_from_json(payloads["spec"])
    meta = json.loads(payloads["meta"].decode())
    model = PipelineModel(
        spec=spec,
        resolution=int(meta["resolution"]),
        input_side=_side_from(payloads["input_side"], "input_side"),
        output_side=_side_from(payloads["output_side"], "output_side"),
        operator=_network_from(payloads["operator"], "operator"),
        refiner=(
            _network_from(payloads["refiner"], "refiner") if "refiner" in payloads else None
        ),
        meta=meta,
    )
    if spec.refiner is not None and model.refiner is None:
        raise DataFormatError("spec declares a refiner but the section is absent")
    return model


def model_overview(path):
    """Section summary of a model file without reconstructing the model."""
    path = Path(path)
    data = path.read_bytes()
    cur = _Cursor(data)
    magic = bytes(cur.take(4, "magic"))
    if magic != MODEL_MAGIC:
        raise MagicError(MODEL_MAGIC, magic)
    version, n_sections = cur.unpack("<HH", "version header")
    sections = []
    spec = meta = None
    for _ in range(n_sections):
        (name_len,) = cur.unpack("<H", "section name length")
        name = bytes(cur.take(name_len, "section name")).decode()
        (size,) = cur.unpack("<Q", f"section {name!r} length")
        payload = bytes(cur.take(size, f"section {name!r} payload"))
        cur.unpack("<I", f"section {name!r} checksum")
        sections.append({"name": name, "bytes": size})
        if name == "spec":
            spec = json.loads(payload.decode())
        elif name == "meta":
            meta = json.loads(payload.decode())
    return {
        "format": "model",
        "version": version,
        "sections": sections,
        "spec": spec,
        "meta": meta,
        "file_bytes": len(data),
    }


__all__ = [
    "RefinerSpec",
    "VariantSpec",
    "PipelineModel",
    "split_indices",
    "fit_pipeline",
    "predict",
    "predict_fields",
    "predict_latents",
    "evaluate",
    "save_model",
    "load_model",
    "model_overview",
    "MODEL_MAGIC",
    "MODEL_VERSION",
]
