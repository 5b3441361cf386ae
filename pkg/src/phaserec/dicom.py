"""Minimal DICOM reader/writer for uncompressed little-endian CT slices.

Supports Explicit and Implicit VR Little Endian.  Sequences are skipped,
never decoded.  Files may start with the 128-byte preamble and ``DICM``
magic, or directly at the first data element.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Union

import numpy as np

from .core import CtScan, RescaleSpec

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
IMPLICIT_VR_LE = "1.2.840.10008.1.2"
SUPPORTED_TRANSFER_SYNTAXES = frozenset({EXPLICIT_VR_LE, IMPLICIT_VR_LE})

CT_IMAGE_STORAGE = "1.2.840.10008.5.1.4.1.1.2"
IMPLEMENTATION_CLASS_UID = "1.2.826.0.1.3680043.9.7433.1.1"

_UNDEFINED = 0xFFFFFFFF
_PREAMBLE = 128


class DicomError(Exception):
    """Base class for DICOM read/write failures."""


class TruncatedFile(DicomError):
    pass


class UnsupportedTransferSyntax(DicomError):
    pass


class BadMagic(DicomError):
    pass


class InvalidDataset(DicomError):
    pass


class MixedSeries(DicomError):
    pass


class DuplicateInstanceNumber(DicomError):
    pass


class DicomTag(NamedTuple):
    group: int
    element: int

    def __str__(self) -> str:
        return f"({self.group:04X},{self.element:04X})"

    @classmethod
    def parse(cls, text: str) -> "DicomTag":
        """Accept ``(0010,0010)``, ``0010,0010`` or ``00100010``."""
        s = text.strip().strip("()").replace(",", "").replace(" ", "")
        if len(s) != 8:
            raise ValueError(f"bad tag {text!r}")
        return cls(int(s[:4], 16), int(s[4:], 16))


# VRs whose explicit encoding uses 2 reserved bytes and a 32-bit length.
LONG_VRS = frozenset({"OB", "OD", "OF", "OL", "OV", "OW", "SQ", "SV", "UC", "UN", "UR", "UT", "UV"})
TEXT_VRS = frozenset({
    "AE", "AS", "CS", "DA", "DS", "DT", "IS", "LO", "LT", "PN", "SH", "ST", "TM", "UC", "UI", "UR", "UT",
})
_NUMERIC = {"US": "H", "SS": "h", "UL": "I", "SL": "i", "FL": "f", "FD": "d", "SV": "q", "UV": "Q"}
KNOWN_VRS = LONG_VRS | TEXT_VRS | frozenset(_NUMERIC) | {"AT"}

# tag -> (vr, keyword); enough to decode implicit-VR CT headers.
_DICTIONARY = {
    (0x0002, 0x0000): ("UL", "FileMetaInformationGroupLength"),
    (0x0002, 0x0001): ("OB", "FileMetaInformationVersion"),
    (0x0002, 0x0002): ("UI", "MediaStorageSOPClassUID"),
    (0x0002, 0x0003): ("UI", "MediaStorageSOPInstanceUID"),
    (0x0002, 0x0010): ("UI", "TransferSyntaxUID"),
    (0x0002, 0x0012): ("UI", "ImplementationClassUID"),
    (0x0008, 0x0005): ("CS", "SpecificCharacterSet"),
    (0x0008, 0x0008): ("CS", "ImageType"),
    (0x0008, 0x0016): ("UI", "SOPClassUID"),
    (0x0008, 0x0018): ("UI", "SOPInstanceUID"),
    (0x0008, 0x0020): ("DA", "StudyDate"),
    (0x0008, 0x0030): ("TM", "StudyTime"),
    (0x0008, 0x0050): ("SH", "AccessionNumber"),
    (0x0008, 0x0060): ("CS", "Modality"),
    (0x0008, 0x0070): ("LO", "Manufacturer"),
    (0x0008, 0x0080): ("LO", "InstitutionName"),
    (0x0008, 0x0090): ("PN", "ReferringPhysicianName"),
    (0x0008, 0x1030): ("LO", "StudyDescription"),
    (0x0008, 0x103E): ("LO", "SeriesDescription"),
    (0x0010, 0x0010): ("PN", "PatientName"),
    (0x0010, 0x0020): ("LO", "PatientID"),
    (0x0010, 0x0030): ("DA", "PatientBirthDate"),
    (0x0010, 0x0040): ("CS", "PatientSex"),
    (0x0010, 0x1010): ("AS", "PatientAge"),
    (0x0018, 0x0050): ("DS", "SliceThickness"),
    (0x0020, 0x000D): ("UI", "StudyInstanceUID"),
    (0x0020, 0x000E): ("UI", "SeriesInstanceUID"),
    (0x0020, 0x0010): ("SH", "StudyID"),
    (0x0020, 0x0011): ("IS", "SeriesNumber"),
    (0x0020, 0x0013): ("IS", "InstanceNumber"),
    (0x0020, 0x0032): ("DS", "ImagePositionPatient"),
    (0x0020, 0x0037): ("DS", "ImageOrientationPatient"),
    (0x0028, 0x0002): ("US", "SamplesPerPixel"),
    (0x0028, 0x0004): ("CS", "PhotometricInterpretation"),
    (0x0028, 0x0010): ("US", "Rows"),
    (0x0028, 0x0011): ("US", "Columns"),
    (0x0028, 0x0030): ("DS", "PixelSpacing"),
    (0x0028, 0x0100): ("US", "BitsAllocated"),
    (0x0028, 0x0101): ("US", "BitsStored"),
    (0x0028, 0x0102): ("US", "HighBit"),
    (0x0028, 0x0103): ("US", "PixelRepresentation"),
    (0x0028, 0x1050): ("DS", "WindowCenter"),
    (0x0028, 0x1051): ("DS", "WindowWidth"),
    (0x0028, 0x1052): ("DS", "RescaleIntercept"),
    (0x0028, 0x1053): ("DS", "RescaleSlope"),
    (0x0032, 0x1064): ("SQ", "RequestedProcedureCodeSequence"),
    (0x0040, 0x0275): ("SQ", "RequestAttributesSequence"),
    (0x7FE0, 0x0010): ("OW", "PixelData"),
}
DICTIONARY = {DicomTag(*k): v for k, v in _DICTIONARY.items()}
KEYWORDS = {kw: tag for tag, (_, kw) in DICTIONARY.items()}

PIXEL_DATA = KEYWORDS["PixelData"]
TRANSFER_SYNTAX_UID = KEYWORDS["TransferSyntaxUID"]

DEFAULT_WHITELIST = frozenset(KEYWORDS[k] for k in (
    "SOPClassUID", "SOPInstanceUID", "StudyInstanceUID", "SeriesInstanceUID",
    "InstanceNumber", "Modality", "Rows", "Columns", "BitsAllocated", "BitsStored",
    "PixelRepresentation", "RescaleSlope", "RescaleIntercept", "WindowCenter",
    "WindowWidth", "SliceThickness", "PixelSpacing", "ImagePositionPatient",
    "ImageOrientationPatient", "PixelData",
))

TagLike = Union[DicomTag, tuple, str]


def as_tag(key: TagLike) -> DicomTag:
    if isinstance(key, DicomTag):
        return key
    if isinstance(key, str):
        if key in KEYWORDS:
            return KEYWORDS[key]
        return DicomTag.parse(key)
    return DicomTag(*key)


def _pad_byte(vr: str) -> bytes:
    if vr == "UI" or vr not in TEXT_VRS:
        return b"\x00"
    return b" "


def _format_ds(x: float) -> str:
    if not math.isfinite(x):
        raise InvalidDataset(f"decimal string must be finite, got {x}")
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    for digits in range(16, 5, -1):
        s = f"{x:.{digits}g}"
        if len(s) <= 16:
            return s
    raise InvalidDataset(f"cannot encode {x} in 16 characters")


@dataclass(frozen=True)
class DicomElement:
    """One data element. ``raw`` is always stored padded to even length."""

    tag: DicomTag
    vr: str
    raw: bytes

    def __post_init__(self):
        object.__setattr__(self, "tag", as_tag(self.tag))
        raw = bytes(self.raw)
        if len(raw) % 2:
            raw += _pad_byte(self.vr)
        object.__setattr__(self, "raw", raw)

    @classmethod
    def from_value(cls, tag: TagLike, vr: str, value) -> "DicomElement":
        """Encode a Python value (str, number, sequence of numbers or bytes)."""
        if isinstance(value, (bytes, bytearray, memoryview)):
            return cls(as_tag(tag), vr, bytes(value))
        if vr in _NUMERIC:
            vals = value if isinstance(value, (list, tuple, np.ndarray)) else [value]
            return cls(as_tag(tag), vr, struct.pack(f"<{len(vals)}{_NUMERIC[vr]}", *vals))
        if vr == "AT":
            vals = [value] if isinstance(value, DicomTag) else list(value)
            return cls(as_tag(tag), vr, b"".join(struct.pack("<HH", *t) for t in vals))
        if vr == "DS" and not isinstance(value, str):
            vals = value if isinstance(value, (list, tuple, np.ndarray)) else [value]
            value = "\\".join(_format_ds(float(v)) for v in vals)
        elif vr == "IS" and not isinstance(value, str):
            vals = value if isinstance(value, (list, tuple, np.ndarray)) else [value]
            value = "\\".join(str(int(v)) for v in vals)
        return cls(as_tag(tag), vr, str(value).encode("latin-1"))

    @property
    def keyword(self) -> Optional[str]:
        entry = DICTIONARY.get(self.tag)
        return entry[1] if entry else None

    @property
    def value(self):
        """Decoded view of ``raw``."""
        vr = self.vr
        if vr in TEXT_VRS:
            text = self.raw.decode("latin-1").rstrip("\x00 ")
            if vr in ("DS", "IS"):
                parts = [p.strip() for p in text.split("\\")]
                conv = float if vr == "DS" else int
                vals = tuple(conv(p) for p in parts if p)
                if vr == "DS" and not all(math.isfinite(v) for v in vals):
                    raise ValueError(f"non-finite decimal string in {self.tag}")
                if len(vals) == 1:
                    return vals[0]
                return vals
            return text
        if vr in _NUMERIC:
            fmt = _NUMERIC[vr]
            n = len(self.raw) // struct.calcsize(fmt)
            vals = struct.unpack(f"<{n}{fmt}", self.raw[: n * struct.calcsize(fmt)])
            return vals[0] if n == 1 else vals
        if vr == "AT":
            n = len(self.raw) // 4
            vals = tuple(DicomTag(*struct.unpack_from("<HH", self.raw, 4 * i)) for i in range(n))
            return vals[0] if n == 1 else vals
        return self.raw


@dataclass(frozen=True)
class DicomDataset:
    elements: tuple = ()
    transfer_syntax: str = EXPLICIT_VR_LE

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    @cached_property
    def _index(self) -> dict:
        return {el.tag: el for el in self.elements}

    def __contains__(self, key: TagLike) -> bool:
        return as_tag(key) in self._index

    def __getitem__(self, key: TagLike) -> DicomElement:
        return self._index[as_tag(key)]

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def get(self, key: TagLike, default=None):
        el = self._index.get(as_tag(key))
        return default if el is None else el.value

    @property
    def tags(self) -> list:
        return [el.tag for el in self.elements]

    def replace(self, *new: DicomElement) -> "DicomDataset":
        """Return a copy with the given elements inserted or overwritten."""
        merged = dict(self._index)
        for el in new:
            merged[el.tag] = el
        return DicomDataset(tuple(merged[t] for t in sorted(merged)), self.transfer_syntax)

    def validate(self) -> None:
        """Raise InvalidDataset if a structural invariant is broken."""
        prev = None
        for el in self.elements:
            if not isinstance(el, DicomElement):
                raise InvalidDataset(f"not a DicomElement: {el!r}")
            if prev is not None and el.tag <= prev:
                raise InvalidDataset(f"tags not strictly ascending at {el.tag} (after {prev})")
            prev = el.tag
            if el.vr not in KNOWN_VRS:
                raise InvalidDataset(f"unknown VR {el.vr!r} at {el.tag}")
            if el.vr == "SQ":
                raise InvalidDataset(f"sequence elements are not supported ({el.tag})")
            if el.vr not in LONG_VRS and len(el.raw) > 0xFFFF:
                raise InvalidDataset(f"{el.tag}: value too long for VR {el.vr}")
            if el.vr in ("DS", "IS"):
                try:
                    el.value
                except ValueError as exc:
                    raise InvalidDataset(f"{el.tag}: {exc}") from None
        has_geometry = "Rows" in self and "Columns" in self
        if has_geometry:
            if PIXEL_DATA not in self:
                raise InvalidDataset("Rows/Columns present but no PixelData")
            if "BitsAllocated" not in self:
                raise InvalidDataset("PixelData present without BitsAllocated")
            expected = _expected_pixel_bytes(self.get("Rows"), self.get("Columns"), self.get("BitsAllocated"))
            got = len(self[PIXEL_DATA].raw)
            if got not in (expected, expected + expected % 2):
                raise InvalidDataset(f"PixelData has {got} bytes, geometry requires {expected}")
        ts = self.get(TRANSFER_SYNTAX_UID)
        if ts is not None and ts != self.transfer_syntax:
            raise InvalidDataset(f"TransferSyntaxUID {ts} disagrees with dataset syntax {self.transfer_syntax}")


def _expected_pixel_bytes(rows: int, cols: int, bits: int) -> int:
    return int(rows) * int(cols) * (int(bits) // 8)


# --------------------------------------------------------------------------
# reading
# --------------------------------------------------------------------------


def _is_vr(b: bytes) -> bool:
    try:
        return b.decode("ascii") in KNOWN_VRS
    except UnicodeDecodeError:
        return False


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data = data
        self.pos = pos

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def need(self, n: int, what: str) -> None:
        if self.remaining() < n:
            raise TruncatedFile(f"{what}: need {n} bytes at offset {self.pos}, {self.remaining()} left")

    def peek_tag(self) -> DicomTag:
        self.need(4, "tag")
        return DicomTag(*struct.unpack_from("<HH", self.data, self.pos))

    def header(self, explicit: bool):
        """Read an element header; returns (tag, vr, length)."""
        tag = self.peek_tag()
        if tag.group == 0xFFFE:
            self.need(8, "item header")
            (length,) = struct.unpack_from("<I", self.data, self.pos + 4)
            self.pos += 8
            return tag, None, length
        if explicit:
            self.need(8, f"element header {tag}")
            vr_bytes = self.data[self.pos + 4:self.pos + 6]
            if not _is_vr(vr_bytes):
                raise DicomError(f"invalid VR {vr_bytes!r} at offset {self.pos} for {tag}")
            vr = vr_bytes.decode("ascii")
            if vr in LONG_VRS:
                self.need(12, f"element header {tag}")
                (length,) = struct.unpack_from("<I", self.data, self.pos + 8)
                self.pos += 12
            else:
                (length,) = struct.unpack_from("<H", self.data, self.pos + 6)
                self.pos += 8
            return tag, vr, length
        self.need(8, f"element header {tag}")
        (length,) = struct.unpack_from("<I", self.data, self.pos + 4)
        self.pos += 8
        vr = DICTIONARY.get(tag, ("UN", None))[0]
        return tag, vr, length

    def take(self, length: int, what) -> bytes:
        if length > self.remaining():
            raise TruncatedFile(
                f"{what}: declared length {length} exceeds remaining {self.remaining()} bytes"
            )
        out = self.data[self.pos:self.pos + length]
        self.pos += length
        return out

    def skip_undefined_sequence(self, explicit: bool) -> None:
        while True:
            tag, _, length = self.header(explicit)
            if tag == (0xFFFE, 0xE0DD):
                return
            if tag != (0xFFFE, 0xE000):
                raise DicomError(f"expected sequence item, found {tag}")
            if length == _UNDEFINED:
                self.skip_undefined_item(explicit)
            else:
                self.take(length, "sequence item")

    def skip_undefined_item(self, explicit: bool) -> None:
        while True:
            tag, vr, length = self.header(explicit)
            if tag == (0xFFFE, 0xE00D):
                return
            if length == _UNDEFINED:
                self.skip_undefined_sequence(explicit)
            else:
                self.take(length, tag)


def _looks_like_element(data: bytes) -> bool:
    if len(data) < 8:
        return False
    group, element = struct.unpack_from("<HH", data, 0)
    if group % 2 or group == 0 or group >= 0xFFFE:
        return False
    if _is_vr(data[4:6]):
        return True
    (length,) = struct.unpack_from("<I", data, 4)
    return DicomTag(group, element) in DICTIONARY and length <= len(data) - 8


def parse_dicom(data: bytes) -> DicomDataset:
    """Parse a DICOM byte stream into a dataset (elements in tag order)."""
    data = bytes(data)
    if len(data) >= _PREAMBLE + 4 and data[_PREAMBLE:_PREAMBLE + 4] == b"DICM":
        pos = _PREAMBLE + 4
    elif _looks_like_element(data):
        pos = 0
    else:
        raise BadMagic("no DICM magic after preamble and no recognizable first element")

    rd = _Reader(data, pos)
    elements = {}

    def add(el: DicomElement):
        if el.tag in elements:
            raise DicomError(f"duplicate element {el.tag}")
        elements[el.tag] = el

    # file meta group is always explicit VR little endian
    while rd.remaining() >= 4 and rd.peek_tag().group == 0x0002:
        tag, vr, length = rd.header(True)
        add(DicomElement(tag, vr, rd.take(length, tag)))

    ts_el = elements.get(TRANSFER_SYNTAX_UID)
    if ts_el is not None:
        syntax = ts_el.value
    elif rd.remaining() >= 6 and _is_vr(data[rd.pos + 4:rd.pos + 6]):
        syntax = EXPLICIT_VR_LE
    else:
        syntax = IMPLICIT_VR_LE
    if syntax not in SUPPORTED_TRANSFER_SYNTAXES:
        raise UnsupportedTransferSyntax(syntax)
    explicit = syntax == EXPLICIT_VR_LE

    while rd.remaining() > 0:
        tag, vr, length = rd.header(explicit)
        if tag.group == 0xFFFE:
            raise DicomError(f"unexpected item tag {tag} at top level")
        if tag == PIXEL_DATA:
            if length == _UNDEFINED:
                raise UnsupportedTransferSyntax("encapsulated (compressed) pixel data")
            geom = [elements.get(KEYWORDS[k]) for k in ("Rows", "Columns", "BitsAllocated")]
            if all(g is not None for g in geom):
                expected = _expected_pixel_bytes(*(g.value for g in geom))
                if length < expected:
                    raise TruncatedFile(f"PixelData holds {length} bytes, image needs {expected}")
        if vr == "SQ" or (vr == "UN" and length == _UNDEFINED):
            if length == _UNDEFINED:
                rd.skip_undefined_sequence(explicit)
            else:
                rd.take(length, tag)
            continue
        if length == _UNDEFINED:
            raise DicomError(f"undefined length on non-sequence element {tag}")
        add(DicomElement(tag, vr, rd.take(length, tag)))

    ordered = tuple(elements[t] for t in sorted(elements))
    return DicomDataset(ordered, syntax)


def read_dicom(path) -> DicomDataset:
    with open(path, "rb") as fh:
        return parse_dicom(fh.read())


# --------------------------------------------------------------------------
# writing
# --------------------------------------------------------------------------


def _encode_element(el: DicomElement) -> bytes:
    head = struct.pack("<HH", el.tag.group, el.tag.element) + el.vr.encode("ascii")
    if el.vr in LONG_VRS:
        head += struct.pack("<HI", 0, len(el.raw))
    else:
        head += struct.pack("<H", len(el.raw))
    return head + el.raw


def write_fixture(ds: DicomDataset) -> bytes:
    """Serialize as Explicit VR Little Endian.

    A preamble and ``DICM`` magic are emitted only when the dataset carries
    file meta (group 0002) elements, so that parsing the output reproduces
    the dataset exactly.
    """
    if ds.transfer_syntax != EXPLICIT_VR_LE:
        raise InvalidDataset(f"can only write Explicit VR Little Endian, dataset is {ds.transfer_syntax}")
    ds.validate()
    meta = [el for el in ds.elements if el.tag.group == 0x0002]
    body = [el for el in ds.elements if el.tag.group != 0x0002]
    out = bytearray()
    if meta:
        out += b"\x00" * _PREAMBLE + b"DICM"
    for el in meta + body:
        out += _encode_element(el)
    return bytes(out)


def file_meta(sop_class_uid: str, sop_instance_uid: str) -> list:
    """File meta group elements for an Explicit VR Little Endian file."""
    rest = [
        DicomElement((0x0002, 0x0001), "OB", b"\x00\x01"),
        DicomElement.from_value((0x0002, 0x0002), "UI", sop_class_uid),
        DicomElement.from_value((0x0002, 0x0003), "UI", sop_instance_uid),
        DicomElement.from_value(TRANSFER_SYNTAX_UID, "UI", EXPLICIT_VR_LE),
        DicomElement.from_value((0x0002, 0x0012), "UI", IMPLEMENTATION_CLASS_UID),
    ]
    group_len = sum(len(_encode_element(el)) for el in rest)
    return [DicomElement.from_value((0x0002, 0x0000), "UL", group_len)] + rest


# --------------------------------------------------------------------------
# de-identification and scan assembly
# --------------------------------------------------------------------------


def anonymize(ds: DicomDataset, whitelist: Iterable) -> DicomDataset:
    """Keep only whitelisted elements; the input is not modified."""
    keep = {as_tag(t) for t in whitelist}
    if not keep:
        raise ValueError("whitelist must not be empty")
    return DicomDataset(tuple(el for el in ds.elements if el.tag in keep), ds.transfer_syntax)


def read_whitelist(lines: Iterable[str]) -> frozenset:
    """Parse a whitelist: one tag or keyword per line, ``#`` comments."""
    tags = set()
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            tags.add(as_tag(line))
    if not tags:
        raise ValueError("whitelist file lists no tags")
    return frozenset(tags)


def pixel_array(ds: DicomDataset) -> np.ndarray:
    """Stored pixel values as a (rows, cols) integer array."""
    for kw in ("Rows", "Columns", "PixelData"):
        if kw not in ds:
            raise InvalidDataset(f"missing {kw}")
    rows, cols = int(ds.get("Rows")), int(ds.get("Columns"))
    bits = int(ds.get("BitsAllocated", 16))
    stored = int(ds.get("BitsStored", bits))
    signed = int(ds.get("PixelRepresentation", 0)) == 1
    if bits not in (8, 16, 32):
        raise InvalidDataset(f"unsupported BitsAllocated {bits}")
    dtype = np.dtype(f"<{'i' if signed else 'u'}{bits // 8}")
    n = rows * cols
    raw = ds[PIXEL_DATA].raw
    if len(raw) < n * dtype.itemsize:
        raise TruncatedFile(f"PixelData holds {len(raw)} bytes, image needs {n * dtype.itemsize}")
    arr = np.frombuffer(raw, dtype=dtype, count=n).astype(np.int64)
    if stored < bits:
        arr &= (1 << stored) - 1
        if signed:
            sign = 1 << (stored - 1)
            arr = (arr ^ sign) - sign
    return arr.reshape(rows, cols)


def rescale_of(ds: DicomDataset) -> RescaleSpec:
    return RescaleSpec(float(ds.get("RescaleSlope", 1.0)), float(ds.get("RescaleIntercept", 0.0)))


def extract_scan(datasets: Iterable[DicomDataset], label=None) -> CtScan:
    """Assemble one series into a CtScan of HU values ordered by InstanceNumber."""
    datasets = list(datasets)
    if not datasets:
        raise InvalidDataset("no datasets given")
    series = {ds.get("SeriesInstanceUID") for ds in datasets}
    if len(series) != 1 or None in series:
        raise MixedSeries(f"expected one SeriesInstanceUID, found {sorted(map(str, series))}")
    numbered = []
    seen = set()
    for ds in datasets:
        inst = ds.get("InstanceNumber")
        if inst is None:
            raise InvalidDataset("missing InstanceNumber")
        if inst in seen:
            raise DuplicateInstanceNumber(f"InstanceNumber {inst} appears twice")
        seen.add(inst)
        numbered.append((int(inst), ds))
    numbered.sort(key=lambda t: t[0])

    slices = []
    for inst, ds in numbered:
        raw = pixel_array(ds)
        rs = rescale_of(ds)
        slices.append(raw.astype(np.float64) * rs.slope + rs.intercept)
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise InvalidDataset(f"slices differ in size: {sorted(shapes)}")
    first = numbered[0][1]
    return CtScan(
        series_uid=series.pop(),
        study_uid=first.get("StudyInstanceUID", ""),
        volume=np.stack(slices),
        instance_numbers=tuple(i for i, _ in numbered),
        label=label,
    )


def iter_tree(root):
    """Yield (path, dataset_or_None) for every file under ``root``, sorted.

    Files that fail to parse yield ``None`` together with the error.
    """
    for path in sorted(p for p in Path(root).rglob("*") if p.is_file()):
        try:
            yield path, read_dicom(path), None
        except DicomError as exc:
            yield path, None, exc


def load_scans(root, labels: Optional[dict] = None, skipped: Optional[list] = None) -> list:
    """Group every parseable file under ``root`` by series into CtScans.

    ``labels`` maps series UID to PhaseLabel.  Unparseable files are
    appended to ``skipped`` as (path, error).  Scans come back sorted by
    series UID.
    """
    groups: dict = {}
    for path, ds, err in iter_tree(root):
        if ds is None:
            if skipped is not None:
                skipped.append((path, err))
            continue
        uid = ds.get("SeriesInstanceUID")
        if uid is None:
            if skipped is not None:
                skipped.append((path, InvalidDataset("no SeriesInstanceUID")))
            continue
        groups.setdefault(uid, []).append(ds)
    labels = labels or {}
    return [extract_scan(groups[uid], labels.get(uid)) for uid in sorted(groups)]
