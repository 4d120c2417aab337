"""Bit-exact reader/writer for single-HDU, 2D, BITPIX=-64 FITS images.

Only the subset the convolution service needs is supported: one primary HDU,
``NAXIS = 2``, big-endian 64-bit floats, no BSCALE/BZERO and no extensions.
Cards read from a file keep their original 80-byte image, so keywords this
module does not understand are written back byte for byte.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

BLOCK = 2880
CARD = 80
COMMENTARY = frozenset({"COMMENT", "HISTORY", "", "END"})
MANDATORY = ("SIMPLE", "BITPIX", "NAXIS", "NAXIS1", "NAXIS2")

_KEYWORD_RE = re.compile(r"^[A-Z0-9_-]{0,8}$")
_INT_RE = re.compile(r"^[+-]?\d+$")


class FormatError(ValueError):
    """The byte string is not a FITS file this module can read."""


class NotBlockAligned(FormatError):
    pass


class MissingSimple(FormatError):
    pass


class MissingEnd(FormatError):
    pass


class MissingKeyword(FormatError):
    pass


class UnsupportedBitpix(FormatError):
    pass


class UnsupportedNaxis(FormatError):
    pass


class UnsupportedExtension(FormatError):
    pass


class TruncatedData(FormatError):
    pass


class ValidationError(ValueError):
    """An in-memory image or card violates the writable subset."""


@dataclass(frozen=True)
class HeaderCard:
    keyword: str
    value: bool | int | float | str | None = None
    comment: str = ""
    # original card image when read from a file; not carried by dataclasses.replace
    raw: bytes | None = field(default=None, init=False, compare=False, repr=False)

    def __post_init__(self):
        # trailing blanks carry no meaning in FITS text, so keep the canonical form
        if isinstance(self.value, str):
            object.__setattr__(self, "value", self.value.rstrip(" "))
        comment = self.comment.rstrip(" ")
        object.__setattr__(self, "comment", comment if self.is_commentary else comment.lstrip(" "))

    @property
    def is_commentary(self) -> bool:
        return self.keyword in COMMENTARY

    def to_bytes(self) -> bytes:
        if self.raw is not None:
            return self.raw
        return format_card(self)


def _format_value(value) -> str:
    if value is None:
        return " " * 20
    if isinstance(value, bool):
        return f"{'T' if value else 'F':>20}"
    if isinstance(value, (int, np.integer)):
        return f"{int(value):>20}"
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            raise ValidationError(f"non-finite header value {value!r}")
        return f"{repr(float(value)).upper():>20}"
    if isinstance(value, str):
        return f"{quote_string(value):<20}"
    raise ValidationError(f"unsupported header value type {type(value).__name__}")


def quote_string(text: str) -> str:
    return "'" + text.replace("'", "''").ljust(8) + "'"


def format_card(card: HeaderCard) -> bytes:
    if not _KEYWORD_RE.match(card.keyword):
        raise ValidationError(f"invalid keyword {card.keyword!r}")
    if card.is_commentary:
        if card.value is not None:
            raise ValidationError(f"{card.keyword or 'blank'} card carries its text in the comment")
        image = card.keyword.ljust(8) + card.comment
    else:
        image = card.keyword.ljust(8) + "= " + _format_value(card.value)
        if card.comment:
            image += " / " + card.comment
    if len(image) > CARD:
        raise ValidationError(f"card {card.keyword!r} is longer than 80 characters")
    try:
        return image.ljust(CARD).encode("ascii")
    except UnicodeEncodeError:
        raise ValidationError(f"card {card.keyword!r} is not ASCII") from None


def parse_card(image: bytes) -> HeaderCard:
    try:
        text = image.decode("ascii")
    except UnicodeDecodeError:
        raise FormatError("header card is not ASCII") from None
    keyword = text[:8].rstrip()
    if keyword in COMMENTARY or text[8:10] != "= ":
        card = HeaderCard(keyword, None, text[8:].rstrip())
    else:
        value, comment = _parse_value(text[10:], keyword)
        card = HeaderCard(keyword, value, comment)
    object.__setattr__(card, "raw", bytes(image))
    return card


def _parse_value(field_text: str, keyword: str):
    body = field_text.lstrip()
    if body.startswith("'"):
        i, chars = 1, []
        while True:
            j = body.find("'", i)
            if j < 0:
                raise FormatError(f"unterminated string in {keyword}")
            chars.append(body[i:j])
            if body[j + 1:j + 2] == "'":
                chars.append("'")
                i = j + 2
                continue
            rest = body[j + 1:]
            break
        value = "".join(chars).rstrip()
    else:
        token, _, comment = body.partition("/")
        token = token.strip()
        rest = "/" + comment if _ else ""
        if not token:
            value = None
        elif token in ("T", "F"):
            value = token == "T"
        elif _INT_RE.match(token):
            value = int(token)
        else:
            try:
                value = float(token.replace("D", "E"))
            except ValueError:
                raise FormatError(f"cannot parse value of {keyword}: {token!r}") from None
    rest = rest.strip()
    comment = rest[1:].strip() if rest.startswith("/") else ""
    return value, comment


class FitsImage:
    """A 2D float64 image plus its ordered header cards (ending in ``END``)."""

    def __init__(self, cards, pixels):
        self.cards = tuple(cards)
        self.pixels = np.ascontiguousarray(pixels, dtype=np.float64)

    @classmethod
    def from_pixels(cls, pixels, cards=()) -> FitsImage:
        """Wrap an array, adding the mandatory cards in front and END at the back."""
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise ValidationError("pixels must be a 2D array")
        height, width = pixels.shape
        head = [
            HeaderCard("SIMPLE", True, "conforms to FITS standard"),
            HeaderCard("BITPIX", -64, "array data type"),
            HeaderCard("NAXIS", 2, "number of array dimensions"),
            HeaderCard("NAXIS1", width),
            HeaderCard("NAXIS2", height),
        ]
        return cls([*head, *cards, HeaderCard("END")], pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def get(self, keyword, default=None):
        for card in self.cards:
            if card.keyword == keyword:
                return card.value
        return default

    def with_card(self, card: HeaderCard) -> FitsImage:
        """Copy with ``card`` inserted just before END."""
        return FitsImage([*self.cards[:-1], card, self.cards[-1]], self.pixels.copy())

    def validate(self):
        if self.pixels.ndim != 2 or 0 in self.pixels.shape:
            raise ValidationError("pixels must be a non-empty 2D grid")
        expected = (True, -64, 2, self.width, self.height)
        if len(self.cards) < 6:
            raise ValidationError("header is missing mandatory cards")
        for card, keyword, value in zip(self.cards, MANDATORY, expected):
            if card.keyword != keyword or card.value != value or type(card.value) is not type(value):
                raise ValidationError(f"expected {keyword} = {value!r}, found {card.keyword} = {card.value!r}")
        if self.cards[-1].keyword != "END":
            raise ValidationError("header must end with END")
        if any(c.keyword == "END" for c in self.cards[:-1]):
            raise ValidationError("END may only appear once, last")

    def __eq__(self, other):
        if not isinstance(other, FitsImage):
            return NotImplemented
        return (
            self.cards == other.cards
            and self.pixels.shape == other.pixels.shape
            and self.pixels.tobytes() == other.pixels.tobytes()
        )

    def __repr__(self):
        return f"FitsImage({self.width}x{self.height}, {len(self.cards)} cards)"


def _pad(data: bytes, fill: bytes) -> bytes:
    return data + fill * (-len(data) % BLOCK)


def iter_fits(image: FitsImage, rows_per_chunk: int = 64):
    """Yield the serialized file piecewise: header blocks, then data rows, then padding."""
    image.validate()
    header = b"".join(card.to_bytes() for card in image.cards)
    yield _pad(header, b" ")
    for start in range(0, image.height, rows_per_chunk):
        yield image.pixels[start:start + rows_per_chunk].astype(">f8").tobytes()
    nbytes = image.width * image.height * 8
    if nbytes % BLOCK:
        yield b"\0" * (-nbytes % BLOCK)


def write_fits(image: FitsImage) -> bytes:
    return b"".join(iter_fits(image))


def read_fits(data: bytes) -> FitsImage:
    data = bytes(data)
    if not data or len(data) % BLOCK:
        raise NotBlockAligned(f"length {len(data)} is not a positive multiple of {BLOCK}")
    if data[:8] != b"SIMPLE  ":
        raise MissingSimple("file does not start with SIMPLE")

    cards = []
    offset = 0
    while True:
        if offset >= len(data):
            raise MissingEnd("no END card before end of file")
        card = parse_card(data[offset:offset + CARD])
        offset += CARD
        cards.append(card)
        if card.keyword == "END":
            break
    header_len = offset + (-offset % BLOCK)

    if cards[0].value is not True:
        raise MissingSimple("SIMPLE is not T")
    values = {}
    for i, keyword in enumerate(MANDATORY):
        if i >= len(cards) or cards[i].keyword != keyword:
            raise MissingKeyword(f"card {i + 1} must be {keyword}")
        values[keyword] = cards[i].value
    if values["BITPIX"] != -64:
        raise UnsupportedBitpix(f"BITPIX = {values['BITPIX']!r}; only -64 is supported")
    if values["NAXIS"] != 2:
        raise UnsupportedNaxis(f"NAXIS = {values['NAXIS']!r}; only 2 is supported")
    width, height = values["NAXIS1"], values["NAXIS2"]
    for keyword, n in (("NAXIS1", width), ("NAXIS2", height)):
        if type(n) is not int or n < 1:
            raise FormatError(f"{keyword} must be a positive integer, found {n!r}")

    nbytes = width * height * 8
    data_len = nbytes + (-nbytes % BLOCK)
    if len(data) < header_len + data_len:
        raise TruncatedData(f"data unit needs {data_len} bytes, found {len(data) - header_len}")
    if len(data) > header_len + data_len:
        raise UnsupportedExtension("bytes follow the primary data unit")
    pixels = np.frombuffer(data, dtype=">f8", count=width * height, offset=header_len)
    return FitsImage(cards, pixels.reshape(height, width).astype(np.float64))
