"""Versioned binary model container.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON
header (format version, network config, schema, bin column names,
classes, tensor manifest), then one length-prefixed little-endian
float64 block per tensor in manifest order. Quantile boundaries travel
as the first binary block so they round-trip bit-exactly regardless of
any JSON float formatting.
"""

import json
import struct

import numpy as np

from .bishop_network import Model, NetworkConfig, build_network
from .tabular_embedding import QuantileBins, TabularSchema, fit

MAGIC = b"SPRSHOP1"
FORMAT_VERSION = 1
_BOUNDS = "quantile_boundaries"


class ModelFileError(ValueError):
    """Unreadable, corrupt, or unsupported model file."""


def _header(model):
    schema = model.schema
    names = [name for name, _ in model.named_params()]
    return {
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "schema": {
            "columns": [list(col) for col in schema.columns],
            "vocabs": {name: sorted(schema.vocabs[name],
                                    key=schema.vocabs[name].get)
                       for name in schema.categorical_names},
        },
        "bin_columns": list(model.bins.names),
        "classes": model.classes,
        "tensors": names,
    }


def save_model(path, model):
    """Write the container; tensor bytes are raw float64, bit-exact."""
    blocks = [(_BOUNDS, np.asarray(model.bins.boundaries, dtype=np.float64))]
    blocks += [(name, p.data) for name, p in model.named_params()]
    head = json.dumps(_header(model), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for _, data in blocks:
            arr = np.asarray(data, dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            raw = arr.tobytes(order="C")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise ModelFileError(f"truncated model file while reading {what}")
    return buf


def _read_block(fh, what):
    ndim, = struct.unpack("<I", _read_exact(fh, 4, what))
    if ndim > 16:
        raise ModelFileError(f"implausible rank {ndim} for {what}")
    shape = struct.unpack(f"<{ndim}q", _read_exact(fh, 8 * ndim, what))
    nbytes, = struct.unpack("<Q", _read_exact(fh, 8, what))
    expect = 8 * int(np.prod(shape, dtype=np.int64))
    if nbytes != expect:
        raise ModelFileError(f"block size mismatch for {what}: "
                             f"{nbytes} bytes for shape {shape}")
    arr = np.frombuffer(_read_exact(fh, nbytes, what), dtype="<f8")
    return arr.reshape(shape).astype(np.float64)


def load_model(path):
    """Rebuild a Model whose parameters are bitwise those saved."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise ModelFileError(f"{path} is not a model file "
                                 f"(bad magic)")
        hlen, = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            head = json.loads(_read_exact(fh, hlen, "header"))
        except json.JSONDecodeError as err:
            raise ModelFileError(f"corrupt model header: {err}") from err
        version = head.get("version")
        if version != FORMAT_VERSION:
            raise ModelFileError(
                f"unsupported model format version {version!r} "
                f"(this build reads version {FORMAT_VERSION})")
        cfg = NetworkConfig(**head["config"])
        columns = [tuple(col) for col in head["schema"]["columns"]]
        vocabs = {name: {v: i for i, v in enumerate(vals)}
                  for name, vals in head["schema"]["vocabs"].items()}
        schema = TabularSchema(columns, vocabs)

        boundaries = _read_block(fh, _BOUNDS)
        bins = QuantileBins(boundaries, head["bin_columns"])

        model = _build_shell(cfg, schema, bins, head.get("classes"))
        named = dict(model.named_params())
        if list(named) != list(head["tensors"]):
            raise ModelFileError(
                "model file tensor manifest does not match this "
                "configuration (schema/config drift)")
        for name in head["tensors"]:
            data = _read_block(fh, name)
            if data.shape != named[name].data.shape:
                raise ModelFileError(
                    f"tensor {name!r} has shape {data.shape}, expected "
                    f"{named[name].data.shape}")
            named[name].data = data
        if fh.read(1):
            raise ModelFileError("trailing bytes after last tensor")
    return model


def _build_shell(cfg, schema, bins, classes):
    """Model with correct shapes; every value is overwritten by the load."""
    rng = np.random.default_rng(0)
    placeholder_rows = []
    row = {}
    for name in schema.numeric_names:
        row[name] = 0.0
    for name in schema.categorical_names:
        vocab = list(schema.vocabs[name])
        row[name] = vocab[0] if vocab else "?"
    placeholder_rows.append(row)
    _, _, tables = fit(placeholder_rows, schema.columns, g=cfg.g,
                       g_shared=cfg.g_shared, l=cfg.l,
                       d_model=cfg.d_model, seed=0)
    # the placeholder fit built one-entry vocab tables; resize to schema
    from .tensor_autodiff import Tensor
    tables.e_ind = [Tensor(np.zeros((len(schema.vocabs[name]) + 1,
                                     tables.g_ind)), requires_grad=True)
                    for name in schema.categorical_names]
    tables.e_shared = Tensor(np.zeros((schema.n_cat, tables.g_shared)),
                             requires_grad=True)
    net = build_network(rng, cfg, schema.n)
    return Model(cfg, schema, bins, tables, net, classes=classes)
