"""Boxed-answer extraction and exact answer checking.

The reward is binary: 1.0 when the last top-level ``\\boxed{...}`` in a
response parses to a value equivalent to the gold answer, 0.0 otherwise.
Numbers compare by exact rational value, everything else by a normalized
string. There is deliberately no symbolic algebra here.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional

__all__ = [
    "AnswerKind",
    "AnswerValue",
    "FailureReason",
    "UnparseableAnswer",
    "VerifierOutcome",
    "extract_boxed",
    "parse_answer",
    "equivalent",
    "reward",
]


class UnparseableAnswer(ValueError):
    """Raised when an answer string cannot be turned into an AnswerValue."""


class AnswerKind(str, Enum):
    INTEGER = "integer"
    RATIONAL = "rational"
    DECIMAL = "decimal"
    SYMBOLIC = "symbolic-text"


class FailureReason(str, Enum):
    NO_BOXED = "no-boxed-found"
    UNPARSEABLE = "unparseable"
    MISMATCH = "mismatch"


@dataclass(frozen=True)
class AnswerValue:
    """A parsed answer.

    Only the fields relevant to ``kind`` are meaningful. Integers use
    ``numerator``; rationals use ``numerator``/``denominator`` in lowest
    terms; decimals use ``numerator`` as the significand and ``exponent``
    (value = significand * 10**exponent); symbolic text uses ``text``.
    Use the ``integer``/``rational``/``decimal``/``symbolic`` constructors.
    """

    kind: AnswerKind
    numerator: int = 0
    denominator: int = 1
    exponent: int = 0
    text: str = ""

    def __post_init__(self):
        if self.kind is AnswerKind.RATIONAL:
            if self.denominator <= 0:
                raise ValueError("rational denominator must be positive")
            if math.gcd(self.numerator, self.denominator) != 1:
                raise ValueError("rational must be in lowest terms")
        elif self.kind is AnswerKind.DECIMAL and self.exponent >= 0:
            raise ValueError("decimal exponent must be negative; use integer")

    @classmethod
    def integer(cls, value: int) -> "AnswerValue":
        return cls(AnswerKind.INTEGER, numerator=int(value))

    @classmethod
    def rational(cls, numerator: int, denominator: int) -> "AnswerValue":
        if denominator == 0:
            raise UnparseableAnswer("division by zero")
        frac = Fraction(numerator, denominator)
        return cls(AnswerKind.RATIONAL, numerator=frac.numerator, denominator=frac.denominator)

    @classmethod
    def decimal(cls, significand: int, exponent: int) -> "AnswerValue":
        return cls(AnswerKind.DECIMAL, numerator=int(significand), exponent=int(exponent))

    @classmethod
    def symbolic(cls, text: str) -> "AnswerValue":
        return cls(AnswerKind.SYMBOLIC, text=_clean(text))

    @property
    def is_numeric(self) -> bool:
        return self.kind is not AnswerKind.SYMBOLIC

    def as_fraction(self) -> Fraction:
        if self.kind is AnswerKind.INTEGER:
            return Fraction(self.numerator)
        if self.kind is AnswerKind.RATIONAL:
            return Fraction(self.numerator, self.denominator)
        if self.kind is AnswerKind.DECIMAL:
            return Fraction(self.numerator, 10 ** (-self.exponent))
        raise TypeError("symbolic answers have no numeric value")

    def render(self) -> str:
        """Canonical string form; ``parse_answer(v.render()) == v``."""
        if self.kind is AnswerKind.INTEGER:
            return str(self.numerator)
        if self.kind is AnswerKind.RATIONAL:
            sign = "-" if self.numerator < 0 else ""
            return f"{sign}\\frac{{{abs(self.numerator)}}}{{{self.denominator}}}"
        if self.kind is AnswerKind.DECIMAL:
            return _render_decimal(self.numerator, self.exponent)
        return self.text


@dataclass(frozen=True)
class VerifierOutcome:
    extracted: Optional[str]
    parsed: Optional[AnswerValue]
    reward: float
    failure_reason: Optional[FailureReason]

    def to_json(self) -> dict:
        return {
            "reward": int(self.reward),
            "extracted": self.extracted,
            "failure_reason": None if self.failure_reason is None else self.failure_reason.value,
        }


def _render_decimal(significand: int, exponent: int) -> str:
    sign = "-" if significand < 0 else ""
    digits = str(abs(significand))
    places = -exponent
    digits = digits.rjust(places + 1, "0")
    return f"{sign}{digits[:-places]}.{digits[-places:]}"


# --------------------------------------------------------------------------
# extraction
# --------------------------------------------------------------------------

_BOX_RE = re.compile(r"\\boxed\s*\{")


def _balanced_end(text: str, start: int) -> Optional[int]:
    """Index of the brace closing the group that opens just before ``start``."""
    depth = 1
    i = start
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\\":
            i += 2
            continue
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
        i += 1
    return None


def extract_boxed(text: str) -> Optional[str]:
    """Return the content of the last top-level ``\\boxed{...}`` in ``text``.

    Nested braces are matched by depth counting; backslash-escaped braces
    do not count. If the last box is never closed (a truncated response)
    the result is None rather than an earlier candidate.
    """
    found: Optional[str] = None
    pos = 0
    while True:
        m = _BOX_RE.search(text, pos)
        if m is None:
            return found
        end = _balanced_end(text, m.end())
        if end is None:
            return None
        found = text[m.end():end]
        pos = end + 1


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

_INT_RE = re.compile(r"[+-]?[0-9]+")
_DEC_RE = re.compile(r"([+-]?)([0-9]*)\.([0-9]+)")
_FRAC_RE = re.compile(r"([+-]?)\\[dt]?frac\{([+-]?[0-9]+)\}\{([+-]?[0-9]+)\}")
_SLASH_RE = re.compile(r"([+-]?[0-9]+)/([+-]?[0-9]+)")
_PERCENT_RE = re.compile(r"(.+?)\\?%")
_SPACE_RE = re.compile(r"\s+")
_DROP_SPACE_RE = re.compile(r"(?<![A-Za-z0-9]) | (?![A-Za-z0-9])")


def _strip_outer_braces(s: str) -> str:
    while s.startswith("{") and _balanced_end(s, 1) == len(s) - 1:
        s = s[1:-1].strip()
    return s


def _clean(raw: str) -> str:
    s = raw
    while True:
        prev = s
        s = s.replace("$", "")
        s = s.replace("\\left", "").replace("\\right", "")
        s = s.replace("\\,", "").replace("\\!", "").replace("\\;", "")
        s = _SPACE_RE.sub(" ", s).strip()
        s = s.rstrip(".").strip()
        s = _strip_outer_braces(s)
        s = _DROP_SPACE_RE.sub("", s)
        if s == prev:
            return s


def _parse_number(s: str) -> Optional[AnswerValue]:
    if _INT_RE.fullmatch(s):
        return AnswerValue.integer(int(s))
    m = _DEC_RE.fullmatch(s)
    if m:
        sign, whole, frac = m.groups()
        significand = int((whole or "0") + frac)
        return AnswerValue.decimal(-significand if sign == "-" else significand, -len(frac))
    m = _FRAC_RE.fullmatch(s)
    if m:
        num, den = int(m.group(2)), int(m.group(3))
        if m.group(1) == "-":
            num = -num
        return AnswerValue.rational(num, den)
    m = _SLASH_RE.fullmatch(s)
    if m:
        return AnswerValue.rational(int(m.group(1)), int(m.group(2)))
    return None


def parse_answer(raw: str) -> AnswerValue:
    """Parse a boxed answer or a gold answer string.

    Recognizes integers, decimals, ``\\frac{A}{B}`` (also ``\\dfrac``/``\\tfrac``), ``A/B``
    with integer parts (as rationals) and percentages (as rationals).
    Anything else becomes normalized symbolic text.

    Raises:
        UnparseableAnswer: empty input or a fraction with a zero denominator.
    """
    s = _clean(raw)
    if not s:
        raise UnparseableAnswer("empty answer")
    value = _parse_number(s)
    if value is not None:
        return value
    m = _PERCENT_RE.fullmatch(s)
    if m:
        inner = _parse_number(_clean(m.group(1)))
        if inner is not None:
            frac = inner.as_fraction() / 100
            return AnswerValue.rational(frac.numerator, frac.denominator)
    return AnswerValue.symbolic(s)


def equivalent(a: AnswerValue, b: AnswerValue) -> bool:
    if a.is_numeric and b.is_numeric:
        return a.as_fraction() == b.as_fraction()
    if a.is_numeric or b.is_numeric:
        return False
    return a.text == b.text


def reward(response: str, gold: str) -> VerifierOutcome:
    """Score ``response`` against ``gold``; never raises on bad responses.

    Raises:
        UnparseableAnswer: if ``gold`` itself does not parse (datasets are
            expected to reject such records at load time).
    """
    gold_value = parse_answer(gold)
    extracted = extract_boxed(response)
    if extracted is None:
        return VerifierOutcome(None, None, 0.0, FailureReason.NO_BOXED)
    try:
        parsed = parse_answer(extracted)
    except UnparseableAnswer:
        return VerifierOutcome(extracted, None, 0.0, FailureReason.UNPARSEABLE)
    if equivalent(parsed, gold_value):
        return VerifierOutcome(extracted, parsed, 1.0, None)
    return VerifierOutcome(extracted, parsed, 0.0, FailureReason.MISMATCH)
