"""Parser for the model formula notation, e.g.

    f2 ~ word + s(measurement.no) + s(measurement.no, by=word)
        + s(measurement.no, traj, bs="fs", m=1)

Grammar::

    formula := ident "~" term ("+" term)*
    term    := ident | "s(" args ")" | "ti(" args ")"
    args    := (ident | key "=" value) ("," ...)*
    value   := INT | STRING | ident | "c(" INT ("," INT)* ")"
"""

from __future__ import annotations

import re
from dataclasses import dataclass

SMOOTH_CLASSES = ("cr", "tp", "ps", "re", "fs")
INNER_CLASSES = ("cr", "ps", "tp")

DEFAULT_BS = "tp"
DEFAULT_K = 10
DEFAULT_M = 2
DEFAULT_XT = "cr"
DEFAULT_TI_K = 5


class FormulaError(ValueError):
    """Syntax or option error, with the character offset where it occurred."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


@dataclass(frozen=True)
class Parametric:
    name: str

    @property
    def label(self) -> str:
        return self.name


@dataclass(frozen=True)
class Smooth:
    var: str
    bs: str = DEFAULT_BS
    k: int = DEFAULT_K
    m: int = DEFAULT_M
    by: str | None = None

    @property
    def label(self) -> str:
        return f"s({self.var})" + (f":{self.by}" if self.by else "")


@dataclass(frozen=True)
class RandomEffect:
    group: str
    slope: str | None = None

    @property
    def label(self) -> str:
        return f"s({self.group}" + (f",{self.slope})" if self.slope else ")")


@dataclass(frozen=True)
class FactorSmooth:
    var: str
    group: str
    k: int = DEFAULT_K
    m: int = DEFAULT_M
    xt: str = DEFAULT_XT

    @property
    def label(self) -> str:
        return f"s({self.var},{self.group})"


@dataclass(frozen=True)
class TensorInteraction:
    var1: str
    var2: str
    k1: int = DEFAULT_TI_K
    k2: int = DEFAULT_TI_K
    bs: str = "cr"
    by: str | None = None

    @property
    def label(self) -> str:
        return f"ti({self.var1},{self.var2})" + (f":{self.by}" if self.by else "")


Term = Parametric | Smooth | RandomEffect | FactorSmooth | TensorInteraction


@dataclass(frozen=True)
class ModelFormula:
    response: str
    terms: tuple[Term, ...]

    def __str__(self) -> str:
        return format_formula(self)

    @property
    def variables(self) -> list[str]:
        out = [self.response]
        for t in self.terms:
            for attr in ("name", "var", "group", "slope", "var1", "var2", "by"):
                v = getattr(t, attr, None)
                if v and v not in out:
                    out.append(v)
        return out


_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<ident>[A-Za-z_.][A-Za-z0-9_.]*)
  | (?P<int>-?[0-9]+)
  | (?P<string>"[^"]*"|'[^']*')
  | (?P<op>[~+(),=])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise FormulaError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def take(self, kind: str, text: str | None = None) -> _Tok:
        t = self.cur
        if t.kind != kind or (text is not None and t.text != text):
            want = repr(text) if text else kind
            got = "end of input" if t.kind == "eof" else repr(t.text)
            raise FormulaError(f"expected {want}, got {got}", t.pos)
        self.i += 1
        return t

    def at(self, kind: str, text: str | None = None) -> bool:
        t = self.cur
        return t.kind == kind and (text is None or t.text == text)

    def formula(self) -> ModelFormula:
        response = self.take("ident").text
        self.take("op", "~")
        terms = [self.term()]
        while self.at("op", "+"):
            self.i += 1
            terms.append(self.term())
        self.take("eof")
        return ModelFormula(response, tuple(terms))

    def term(self) -> Term:
        t = self.take("ident")
        if t.text in ("s", "ti") and self.at("op", "("):
            self.i += 1
            pos_args, opts = self.arglist()
            self.take("op", ")")
            if t.text == "s":
                return _make_smooth(pos_args, opts, t.pos)
            return _make_ti(pos_args, opts, t.pos)
        return Parametric(t.text)

    def arglist(self):
        pos_args: list[str] = []
        opts: dict[str, tuple[object, int]] = {}
        while True:
            name = self.take("ident")
            if self.at("op", "="):
                self.i += 1
                if name.text in opts:
                    raise FormulaError(f"option {name.text!r} given twice", name.pos)
                opts[name.text] = (self.value(), name.pos)
            else:
                if opts:
                    raise FormulaError("positional argument after named option", name.pos)
                pos_args.append(name.text)
            if not self.at("op", ","):
                break
            self.i += 1
        return pos_args, opts

    def value(self):
        t = self.cur
        if t.kind == "int":
            self.i += 1
            return int(t.text)
        if t.kind == "string":
            self.i += 1
            return t.text[1:-1]
        if t.kind == "ident" and t.text == "c" and self.toks[self.i + 1].text == "(":
            self.i += 2
            vals = [int(self.take("int").text)]
            while self.at("op", ","):
                self.i += 1
                vals.append(int(self.take("int").text))
            self.take("op", ")")
            return tuple(vals)
        if t.kind == "ident":
            self.i += 1
            return t.text
        got = "end of input" if t.kind == "eof" else repr(t.text)
        raise FormulaError(f"expected a value, got {got}", t.pos)


def _opt(opts, name, kind, default, allowed=None):
    if name not in opts:
        return default
    value, pos = opts.pop(name)
    if kind is int:
        if not isinstance(value, int):
            raise FormulaError(f"option {name!r} must be an integer", pos)
    elif kind is str:
        if not isinstance(value, str):
            raise FormulaError(f"option {name!r} must be a name or string", pos)
    if allowed is not None and value not in allowed:
        raise FormulaError(f"option {name}={value!r} not one of {', '.join(map(str, allowed))}", pos)
    return value


def _reject_leftovers(opts):
    if opts:
        name, (_, pos) = next(iter(opts.items()))
        raise FormulaError(f"unknown option {name!r}", pos)


def _make_smooth(args, opts, pos) -> Term:
    bs = _opt(opts, "bs", str, DEFAULT_BS, SMOOTH_CLASSES)
    if not args or len(args) > 2:
        raise FormulaError("s() takes one variable, or two for bs=\"re\"/\"fs\"", pos)
    if bs == "re":
        _reject_leftovers(opts)
        return RandomEffect(args[0], args[1] if len(args) == 2 else None)
    if bs == "fs":
        if len(args) != 2:
            raise FormulaError('bs="fs" needs a continuous variable and a grouping factor', pos)
        k = _opt(opts, "k", int, DEFAULT_K)
        m = _opt(opts, "m", int, DEFAULT_M, (1, 2))
        xt = _opt(opts, "xt", str, DEFAULT_XT, INNER_CLASSES)
        _reject_leftovers(opts)
        if k < 2:
            raise FormulaError("k must be at least 2", pos)
        return FactorSmooth(args[0], args[1], k, m, xt)
    if len(args) != 1:
        raise FormulaError(f'bs="{bs}" smooths take a single variable', pos)
    k = _opt(opts, "k", int, DEFAULT_K)
    m = _opt(opts, "m", int, DEFAULT_M, (1, 2))
    by = _opt(opts, "by", str, None)
    _reject_leftovers(opts)
    if k < 2:
        raise FormulaError("k must be at least 2", pos)
    return Smooth(args[0], bs, k, m, by)


def _make_ti(args, opts, pos) -> Term:
    if len(args) != 2:
        raise FormulaError("ti() takes exactly two variables", pos)
    k = (DEFAULT_TI_K, DEFAULT_TI_K)
    if "k" in opts:
        value, kpos = opts.pop("k")
        if isinstance(value, int):
            k = (value, value)
        elif isinstance(value, tuple) and len(value) == 2:
            k = value
        else:
            n = len(value) if isinstance(value, tuple) else "a non-integer"
            raise FormulaError(f"ti() k=c(...) needs 2 values, got {n}", kpos)
    if min(k) < 2:
        raise FormulaError("k must be at least 2", pos)
    bs = _opt(opts, "bs", str, "cr", INNER_CLASSES)
    by = _opt(opts, "by", str, None)
    _reject_leftovers(opts)
    return TensorInteraction(args[0], args[1], k[0], k[1], bs, by)


def parse_formula(text: str) -> ModelFormula:
    """Parse formula text; raises :class:`FormulaError` with a position on bad input."""
    f = _Parser(text).formula()
    labels = set()
    for t in f.terms:
        if t.label in labels:
            raise FormulaError(f"duplicate term {t.label}", 0)
        labels.add(t.label)
    if any(isinstance(t, Parametric) and t.name == f.response for t in f.terms):
        raise FormulaError(f"response {f.response!r} also appears as a term", 0)
    return f


def _format_term(t: Term) -> str:
    if isinstance(t, Parametric):
        return t.name
    if isinstance(t, Smooth):
        opts = []
        if t.bs != DEFAULT_BS:
            opts.append(f'bs="{t.bs}"')
        if t.k != DEFAULT_K:
            opts.append(f"k={t.k}")
        if t.m != DEFAULT_M:
            opts.append(f"m={t.m}")
        if t.by:
            opts.append(f"by={t.by}")
        return f"s({', '.join([t.var] + opts)})"
    if isinstance(t, RandomEffect):
        args = [t.group] + ([t.slope] if t.slope else [])
        return f"s({', '.join(args)}, bs=\"re\")"
    if isinstance(t, FactorSmooth):
        opts = ['bs="fs"']
        if t.xt != DEFAULT_XT:
            opts.append(f'xt="{t.xt}"')
        if t.m != DEFAULT_M:
            opts.append(f"m={t.m}")
        if t.k != DEFAULT_K:
            opts.append(f"k={t.k}")
        return f"s({t.var}, {t.group}, {', '.join(opts)})"
    opts = []
    if (t.k1, t.k2) != (DEFAULT_TI_K, DEFAULT_TI_K):
        opts.append(f"k=c({t.k1},{t.k2})")
    if t.bs != "cr":
        opts.append(f'bs="{t.bs}"')
    if t.by:
        opts.append(f"by={t.by}")
    return f"ti({', '.join([t.var1, t.var2] + opts)})"


def format_formula(f: ModelFormula) -> str:
    """Canonical text; default options are left out."""
    return f"{f.response} ~ " + " + ".join(_format_term(t) for t in f.terms)
