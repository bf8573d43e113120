"""
Ordered answer-matching rules used by the accuracy reward.

Every matcher takes raw gold / predicted strings, normalizes them, and returns
a score, or None when the rule does not apply.
"""

import re
from functools import lru_cache

_INTRO_PHRASES = ("the final answer is", "final answer is", "the answer is", "answer is")
_TERMINAL_PUNCT = ".,;:!"
_HEDGE_WORDS = {"or", "either", "maybe", "perhaps", "possibly"}

_THOUSANDS_RE = re.compile(r"[+-]?\d{1,3}(?:,\d{3})+(?:\.\d*)?")
_NUMBER_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:e[+-]?\d+)?", re.IGNORECASE)
_EXPR_RE = re.compile(r"[0-9a-z.+\-*/^() ]+")

NUMERIC_RTOL = 1e-9
MAX_EXPONENT = 64
MAX_DEGREE = 64
MAX_BITS = 4096
MAX_EXPRESSION_LENGTH = 200


def normalize_answer(s):
    """
    Remove non-semantic variation from an answer string.

    Lowercases, collapses whitespace, strips terminal punctuation (.,;:!) and
    leading answer-introduction phrases, repeating until nothing changes.
    """
    previous = None
    out = s
    while out != previous:
        previous = out
        out = " ".join(out.lower().split())
        out = out.rstrip(_TERMINAL_PUNCT).rstrip()
        for phrase in _INTRO_PHRASES:
            if out == phrase:
                out = ""
                break
            if out.startswith(phrase + " ") or out.startswith(phrase + ":"):
                out = out[len(phrase):].lstrip(" :")
                break
    return out


def parse_number(s):
    """Parse a plain, thousands-separated, scientific or percent number; None otherwise."""
    s = s.strip()
    percent = s.endswith("%")
    if percent:
        s = s[:-1].rstrip()
    if _THOUSANDS_RE.fullmatch(s):
        s = s.replace(",", "")
    if not _NUMBER_RE.fullmatch(s):
        return None
    value = float(s)
    return value / 100.0 if percent else value


def match_numeric(gold, pred):
    a = parse_number(normalize_answer(gold))
    b = parse_number(normalize_answer(pred))
    if a is None or b is None:
        return None
    return 1.0 if abs(a - b) <= NUMERIC_RTOL * max(1.0, abs(a), abs(b)) else 0.0


def _small_integer(e):
    if e.is_Integer:
        return abs(int(e)) <= MAX_EXPONENT
    if (e.is_Mul or e.is_Add) and all(arg.is_Integer for arg in e.args):
        return abs(int(e.doit())) <= MAX_EXPONENT
    return False


def _size_bound(e):
    """
    Upper bounds (degree, bits) of an unevaluated expression once expanded.

    Nested powers multiply, so ((x+1)^64)^64 bounds to degree 4096 even though
    every single exponent is small. None for nodes outside the grammar.
    """
    if e.is_Symbol:
        return 1, 0
    if e.is_Rational:
        return 0, abs(int(e.p)).bit_length() + int(e.q).bit_length()
    if e.is_Float:
        return 0, 64
    if e.is_Pow:
        if not _small_integer(e.exp):
            return None
        base = _size_bound(e.base)
        if base is None:
            return None
        n = abs(int(e.exp.doit()))
        return base[0] * n, base[1] * n
    if e.is_Add or e.is_Mul:
        parts = [_size_bound(arg) for arg in e.args]
        if any(part is None for part in parts):
            return None
        degrees = [d for d, _ in parts]
        bits = sum(b for _, b in parts) + len(parts)
        return (max(degrees) if e.is_Add else sum(degrees)), bits
    return None


@lru_cache(maxsize=4096)
def _parse_expression(s):
    if not s or len(s) > MAX_EXPRESSION_LENGTH or not _EXPR_RE.fullmatch(s):
        return None
    words = re.findall(r"[a-z]+", s)
    if any(len(w) > 1 for w in words) or len(set(words)) > 1:
        return None

    import sympy
    from sympy.parsing.sympy_parser import (
        implicit_multiplication,
        parse_expr,
        rationalize,
        standard_transformations,
    )

    local_dict = {w: sympy.Symbol(w) for w in set(words)}
    transformations = standard_transformations + (implicit_multiplication, rationalize)
    source = s.replace("^", "**")
    try:
        unevaluated = parse_expr(source, local_dict=local_dict, transformations=transformations, evaluate=False)
        if not isinstance(unevaluated, sympy.Expr):
            return None
        # bound the expanded size before anything gets evaluated
        bound = _size_bound(unevaluated)
        if bound is None or bound[0] > MAX_DEGREE or bound[1] > MAX_BITS:
            return None
        expr = parse_expr(source, local_dict=local_dict, transformations=transformations)
    except Exception:
        return None
    if not isinstance(expr, sympy.Expr) or expr.has(sympy.zoo, sympy.nan, sympy.oo, -sympy.oo):
        return None
    return expr


def match_symbolic(gold, pred):
    """
    Rational-polynomial equivalence over +, -, *, /, ^, parentheses, integers,
    decimals and a single one-letter variable.
    """
    import sympy

    a = _parse_expression(normalize_answer(gold))
    b = _parse_expression(normalize_answer(pred))
    if a is None or b is None:
        return None
    if len(a.free_symbols | b.free_symbols) > 1:
        return None
    try:
        difference = sympy.cancel(a - b)
    except Exception:
        return None
    return 1.0 if difference == 0 else 0.0


def _is_hedged(text):
    return any(word in _HEDGE_WORDS for word in re.findall(r"\w+", text))


def match_textual(gold, pred):
    """Exact normalized match -> 1.0; gold contained at token boundaries -> 0.5; else 0.0."""
    g = normalize_answer(gold)
    p = normalize_answer(pred)
    if g == p:
        return 1.0
    if not g or _is_hedged(p):
        return 0.0
    if re.search(r"(?<!\w)" + re.escape(g) + r"(?!\w)", p):
        return 0.5
    return 0.0


def _resolve_option(s, options):
    """Index of the option `s` designates, or None if none or ambiguous."""
    s = normalize_answer(s)
    if s.startswith("option "):
        s = s[len("option "):]
    label = s.strip("()").strip()
    n = len(options)

    candidates = set()
    if len(label) == 1 and "a" <= label <= "z" and ord(label) - ord("a") < n:
        candidates.add(ord(label) - ord("a"))
    if label.isdigit() and 1 <= int(label) <= n:
        candidates.add(int(label) - 1)
    for idx, option in enumerate(options):
        if normalize_answer(option) == s:
            candidates.add(idx)
    return candidates.pop() if len(candidates) == 1 else None


def match_domain(gold, pred, options=None):
    """
    Multiple-choice equivalence: letters, 1-based ordinals and the option's full
    text designate the same option, only within the given options.
    """
    if not options:
        return None
    gold_idx = _resolve_option(gold, options)
    if gold_idx is None:
        return None
    return 1.0 if _resolve_option(pred, options) == gold_idx else 0.0
