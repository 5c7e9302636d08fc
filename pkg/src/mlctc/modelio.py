"""Binary model container.

Layout (all little-endian): magic "MPNN", format version u16, kind tag,
an architecture descriptor (JSON), then named parameter tensors stored as
float64. Loading refuses unknown versions and mismatched kind tags instead
of guessing; a round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .corpus import UnitInventory
from .kernels import Rng
from .langcodes import CodeNet, LidNet
from .lm import CharLm
from .superstructure import CtcStack, MainNet, Subnet, Superstructure

MODEL_MAGIC = b"MPNN"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _write_str(fh, text):
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh):
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_model(path, kind, arch, params):
    """Write a model file; ``params`` is an iterable of Param."""
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<H", MODEL_VERSION))
        _write_str(fh, kind)
        _write_str(fh, json.dumps(arch, sort_keys=True))
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            _write_str(fh, p.name)
            value = np.asarray(p.value, dtype="<f8")
            fh.write(struct.pack("<B", value.ndim))
            for extent in value.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(value.tobytes())


def load_model(path, expected_kind=None):
    """Read (kind, arch, {name: float64 array}); refuses bad version/kind."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise ModelFormatError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != MODEL_VERSION:
            raise ModelFormatError(
                f"{path}: refusing to load format version {version} (supported: {MODEL_VERSION})"
            )
        kind = _read_str(fh)
        if expected_kind is not None and kind != expected_kind:
            raise ModelFormatError(f"{path}: model kind {kind!r}, expected {expected_kind!r}")
        arch = json.loads(_read_str(fh))
        (n_params,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(n_params):
            name = _read_str(fh)
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            tensors[name] = data.copy()
    return kind, arch, tensors


# ---------------------------------------------------------------------------
# model object <-> file
# ---------------------------------------------------------------------------

def _assign(params, tensors, dtype):
    by_name = {p.name: p for p in params}
    missing = sorted(set(by_name) - set(tensors))
    extra = sorted(set(tensors) - set(by_name))
    if missing or extra:
        raise ModelFormatError(f"parameter mismatch: missing {missing}, unexpected {extra}")
    for name, p in by_name.items():
        value = tensors[name]
        if value.shape != p.value.shape:
            raise ModelFormatError(
                f"{name}: stored shape {value.shape} != expected {p.value.shape}"
            )
        p.value = value.astype(dtype)
        p.grad = np.zeros_like(p.value)


def lid_arch(net: LidNet):
    return {
        "feat_dim": net.feat_dim, "hidden": net.hidden, "bottleneck": net.bottleneck,
        "n_langs": net.n_langs, "dtype": np.dtype(net.dtype).name,
        "lang_order": list(getattr(net, "lang_order", [])), "trained": net.trained,
    }


def codenet_arch(net: CodeNet):
    return {
        "feat_dim": net.feat_dim, "lfv_dim": net.lfv_dim, "width": net.width,
        "dtype": np.dtype(net.dtype).name, "pretrained": net.pretrained,
    }


def subnet_arch(net: Subnet):
    return {
        "lang": net.lang, "target_kind": net.target_kind,
        "input_dim": net.stack.input_dim, "width": net.width,
        "units": net.inventory.units, "dtype": np.dtype(net.stack.dtype).name,
        "has_head": net.stack.head is not None, "trained": net.trained,
    }


def save_model_object(path, model, extra_arch=None):
    if isinstance(model, LidNet):
        save_model(path, "lid", lid_arch(model), model.params())
    elif isinstance(model, CodeNet):
        save_model(path, "nlc", codenet_arch(model), model.params())
    elif isinstance(model, Subnet):
        save_model(path, "subnet", subnet_arch(model), model.params(with_head=True))
    elif isinstance(model, CharLm):
        arch = {"n_units": model.n_units, "hidden": model.hidden,
                "dtype": np.dtype(model.dtype).name}
        arch.update(extra_arch or {})
        save_model(path, "charlm", arch, model.params())
    elif isinstance(model, Superstructure):
        arch = {
            "mode": model.mode, "dropout_rate": model.dropout_rate,
            "units": model.inventory.units,
            "subnets": [subnet_arch(sn) for sn in model.subnets],
            "codenet": codenet_arch(model.codenet),
            "main": {"input_dim": model.main.input_dim, "width": model.main.width,
                     "n_units": len(model.inventory), "dtype": np.dtype(model.main.dtype).name},
        }
        params = []
        for sn in model.subnets:
            params.extend(sn.params(with_head=True))
        params.extend(model.codenet.params())
        params.extend(model.main.params())
        save_model(path, "joint", arch, params)
    elif isinstance(model, CtcStack):
        arch = {"name": model.name, "input_dim": model.input_dim, "width": model.width,
                "depth": model.depth, "n_units": len(model.head.b.value) if model.head else 0,
                "dtype": np.dtype(model.dtype).name}
        arch.update(extra_arch or {})
        save_model(path, "stack", arch, model.params())
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")


def load_model_object(path, expected_kind=None):
    kind, arch, tensors = load_model(path, expected_kind)
    rng = Rng(0)
    if kind == "lid":
        net = LidNet(arch["feat_dim"], arch["hidden"], arch["bottleneck"],
                     arch["n_langs"], rng, arch["dtype"])
        _assign(net.params(), tensors, np.dtype(arch["dtype"]))
        net.trained = arch.get("trained", True)
        net.lang_order = list(arch.get("lang_order", []))
        return net
    if kind == "nlc":
        net = CodeNet(arch["feat_dim"], arch["lfv_dim"], arch["width"], rng, arch["dtype"])
        _assign(net.params(), tensors, np.dtype(arch["dtype"]))
        net.pretrained = arch.get("pretrained", True)
        return net
    if kind == "subnet":
        net = _build_subnet(arch, rng)
        _assign(net.params(with_head=arch["has_head"]), tensors, np.dtype(arch["dtype"]))
        return net
    if kind == "charlm":
        net = CharLm(arch["n_units"], arch["hidden"], rng, arch["dtype"])
        _assign(net.params(), tensors, np.dtype(arch["dtype"]))
        net.units = arch.get("units")
        return net
    if kind == "joint":
        subnets = [_build_subnet(sa, rng) for sa in arch["subnets"]]
        code = CodeNet(arch["codenet"]["feat_dim"], arch["codenet"]["lfv_dim"],
                       arch["codenet"]["width"], rng, arch["codenet"]["dtype"])
        code.pretrained = arch["codenet"].get("pretrained", True)
        main = MainNet(arch["main"]["input_dim"], arch["main"]["width"],
                       arch["main"]["n_units"], rng, arch["main"]["dtype"])
        inv = UnitInventory(arch["units"])
        model = Superstructure(subnets, code, main, inv, arch["mode"], arch["dropout_rate"])
        params = []
        for sn in model.subnets:
            params.extend(sn.params(with_head=True))
        params.extend(model.codenet.params())
        params.extend(model.main.params())
        _assign(params, tensors, np.dtype(arch["main"]["dtype"]))
        return model
    if kind == "stack":
        stack = CtcStack(arch["name"], arch["input_dim"], arch["width"], arch["depth"],
                         arch["n_units"], rng, arch["dtype"])
        _assign(stack.params(), tensors, np.dtype(arch["dtype"]))
        stack.units = arch.get("units")
        return stack
    raise ModelFormatError(f"unknown model kind {kind!r}")


def _build_subnet(arch, rng):
    net = Subnet(arch["lang"], arch["target_kind"], arch["input_dim"], arch["width"],
                 UnitInventory(arch["units"]), rng, arch["dtype"])
    if not arch["has_head"]:
        net.discard_head()
    net.trained = arch.get("trained", True)
    return net
