"""Binary model/eigenbasis container: JSON header plus checksummed blobs.

Layout: 6-byte magic "PCAKD1", u64 little-endian header length, UTF-8 JSON
header, then one record per blob named in the header, each record being a
u64 byte length, raw float32 little-endian data, and a u32 CRC-32 of that
data. The header carries shapes and provenance; blobs carry only numbers.
Writes go to a temp file in the same directory and are renamed into place.
Serialization is canonical (sorted JSON keys, no timestamps) so identical
inputs produce bit-identical files.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from ..eigenbasis import Eigenbasis
from ..errors import ContainerError
from ..nets import Model, Weights, spec_from_dict, spec_to_dict, validate_weights

MAGIC = b"PCAKD1"
FORMAT_VERSION = 1

_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")


def save_container(path: str | os.PathLike, header: dict,
                   blobs: dict[str, np.ndarray]) -> None:
    """Write header + blobs; header['blobs'] fixes the record order."""
    names = [b["name"] for b in header["blobs"]]
    if sorted(names) != sorted(blobs):
        raise ContainerError("header blob list does not match payload")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_U64.pack(len(head)))
            fh.write(head)
            for name in names:
                data = np.ascontiguousarray(blobs[name], dtype="<f4").tobytes()
                fh.write(_U64.pack(len(data)))
                fh.write(data)
                fh.write(_U32.pack(zlib.crc32(data)))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContainerError(f"truncated container: short read in {what}")
    return data


def load_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a container; returns (header, name -> float32 array)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise ContainerError(f"{path} is not a PCAKD container (bad magic)")
        (head_len,) = _U64.unpack(_read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, head_len, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"corrupt container header: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise ContainerError(
                f"unsupported format version {header.get('format_version')!r}")
        blobs: dict[str, np.ndarray] = {}
        for entry in header["blobs"]:
            name, shape = entry["name"], tuple(entry["shape"])
            (nbytes,) = _U64.unpack(_read_exact(fh, 8, name))
            data = _read_exact(fh, nbytes, name)
            (crc,) = _U32.unpack(_read_exact(fh, 4, f"{name} checksum"))
            if zlib.crc32(data) != crc:
                raise ContainerError(f"checksum mismatch in blob {name!r}")
            arr = np.frombuffer(data, dtype="<f4")
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise ContainerError(
                    f"blob {name!r} holds {arr.size} values, header says {shape}")
            blobs[name] = arr.reshape(shape).astype(np.float32)
        if fh.read(1):
            raise ContainerError("trailing bytes after the last blob")
    return header, blobs


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def _weight_entries(prefix: str, weights: Weights):
    for bi, block in enumerate(weights.blocks):
        for li, (kernel, bias) in enumerate(block):
            yield f"{prefix}/b{bi}/c{li}/kernel", kernel
            yield f"{prefix}/b{bi}/c{li}/bias", bias


def save_model(path: str | os.PathLike, model: Model) -> None:
    blobs = dict(_weight_entries("enc", model.encoder_weights))
    blobs.update(_weight_entries("dec", model.decoder_weights))
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "channels": list(model.channels),
        "encoder": spec_to_dict(model.encoder_spec),
        "decoder": spec_to_dict(model.decoder_spec),
        "trained_blocks": sorted(model.trained_blocks),
        "meta": model.meta,
        "blobs": [{"name": n, "shape": list(a.shape)} for n, a in blobs.items()],
    }
    save_container(path, header, blobs)


def _weights_from_blobs(prefix: str, spec, blobs) -> Weights:
    blocks = []
    for bi, bspec in enumerate(spec.blocks):
        convs = []
        conv_count = sum(1 for l in bspec.layers if l.kind == "conv")
        for li in range(conv_count):
            try:
                kernel = blobs[f"{prefix}/b{bi}/c{li}/kernel"]
                bias = blobs[f"{prefix}/b{bi}/c{li}/bias"]
            except KeyError as exc:
                raise ContainerError(f"model container is missing blob {exc}") from exc
            convs.append((kernel, bias))
        blocks.append(convs)
    return Weights(blocks)


def load_model(path: str | os.PathLike) -> Model:
    header, blobs = load_container(path)
    if header.get("kind") != "model":
        raise ContainerError(f"{path} holds {header.get('kind')!r}, not a model")
    enc_spec = spec_from_dict(header["encoder"])
    dec_spec = spec_from_dict(header["decoder"])
    enc_w = _weights_from_blobs("enc", enc_spec, blobs)
    dec_w = _weights_from_blobs("dec", dec_spec, blobs)
    try:
        validate_weights(enc_spec, enc_w)
        validate_weights(dec_spec, dec_w)
    except Exception as exc:
        raise ContainerError(f"model container weights are inconsistent: {exc}") from exc
    return Model(
        channels=tuple(int(c) for c in header["channels"]),
        encoder_spec=enc_spec,
        encoder_weights=enc_w,
        decoder_spec=dec_spec,
        decoder_weights=dec_w,
        trained_blocks=set(int(b) for b in header.get("trained_blocks", [])),
        meta=dict(header.get("meta", {})),
    )


# ---------------------------------------------------------------------------
# eigenbases
# ---------------------------------------------------------------------------


def save_eigenbases(path: str | os.PathLike, bases: list[Eigenbasis]) -> None:
    blobs = {f"basis/{i}": b.w for i, b in enumerate(bases)}
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "eigenbases",
        "bases": [
            {"layer_id": b.layer_id, "kind": b.kind, "tied_cut": b.tied_cut,
             "meta": b.meta}
            for b in bases
        ],
        "blobs": [{"name": f"basis/{i}", "shape": list(b.w.shape)}
                  for i, b in enumerate(bases)],
    }
    save_container(path, header, blobs)


def load_eigenbases(path: str | os.PathLike) -> list[Eigenbasis]:
    header, blobs = load_container(path)
    if header.get("kind") != "eigenbases":
        raise ContainerError(f"{path} holds {header.get('kind')!r}, not eigenbases")
    bases = []
    for i, info in enumerate(header["bases"]):
        try:
            w = blobs[f"basis/{i}"]
        except KeyError as exc:
            raise ContainerError(f"eigenbasis container is missing blob {exc}") from exc
        bases.append(Eigenbasis(w, layer_id=int(info["layer_id"]),
                                kind=info["kind"], tied_cut=bool(info["tied_cut"]),
                                meta=dict(info.get("meta", {}))))
    return bases
