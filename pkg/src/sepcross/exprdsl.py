"""Small arithmetic expression language for model definitions.

Grammar (standard precedence, ``^`` binds tightest, then unary minus,
then ``* /``, then ``+ -``; equal precedence is left-associative)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # exponent must fold to a constant
    atom   := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'

Known functions: sin, cos, exp, ln, sqrt.  Expressions are immutable
trees; differentiation is symbolic and exact, with no simplification
beyond constant folding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import (
    ExprDomainError,
    ExprSyntaxError,
    MissingBindingError,
    UnknownIdentifierError,
)

FUNCTIONS = ("sin", "cos", "exp", "ln", "sqrt")

_INT_EXP_TOL = 1e-12


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "Expr"


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class Bin:
    op: str  # one of + - * / ^
    left: "Expr"
    right: "Expr"


Expr = Const | Var | Call | Neg | Bin


# ---------------------------------------------------------------------------
# Tokenizer / parser
# ---------------------------------------------------------------------------

class _Tok:
    __slots__ = ("kind", "text", "pos")

    def __init__(self, kind, text, pos):
        self.kind = kind
        self.text = text
        self.pos = pos


def _tokenize(text):
    toks = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            try:
                float(text[i:j])
            except ValueError:
                raise ExprSyntaxError(f"bad number {text[i:j]!r}", i)
            toks.append(_Tok("num", text[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(_Tok("ident", text[i:j], i))
            i = j
            continue
        if c in "+-*/^()":
            toks.append(_Tok(c, c, i))
            i += 1
            continue
        raise ExprSyntaxError(f"unexpected character {c!r}", i)
    toks.append(_Tok("end", "", n))
    return toks


class _Parser:
    def __init__(self, toks, variables):
        self.toks = toks
        self.i = 0
        self.variables = variables

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def parse_expr(self):
        node = self.parse_term()
        while self.peek().kind in ("+", "-"):
            op = self.take().kind
            rhs = self.parse_term()
            node = Bin(op, node, rhs)
        return node

    def parse_term(self):
        node = self.parse_unary()
        while self.peek().kind in ("*", "/"):
            op = self.take().kind
            rhs = self.parse_unary()
            node = Bin(op, node, rhs)
        return node

    def parse_unary(self):
        if self.peek().kind == "-":
            self.take()
            return Neg(self.parse_unary())
        return self.parse_power()

    def parse_power(self):
        base = self.parse_atom()
        if self.peek().kind == "^":
            tok = self.take()
            exponent = self.parse_unary()
            folded = constant_fold(exponent)
            if not isinstance(folded, Const):
                raise ExprSyntaxError("exponent must be a constant", tok.pos)
            return Bin("^", base, folded)
        return base

    def parse_atom(self):
        t = self.take()
        if t.kind == "num":
            return Const(float(t.text))
        if t.kind == "ident":
            if self.peek().kind == "(":
                if t.text not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {t.text!r}", t.pos)
                self.take()
                arg = self.parse_expr()
                close = self.take()
                if close.kind != ")":
                    raise ExprSyntaxError("expected ')'", close.pos)
                return Call(t.text, arg)
            if self.variables is not None and t.text not in self.variables:
                raise UnknownIdentifierError(
                    f"unknown identifier {t.text!r} at offset {t.pos}"
                )
            return Var(t.text)
        if t.kind == "(":
            node = self.parse_expr()
            close = self.take()
            if close.kind != ")":
                raise ExprSyntaxError("expected ')'", close.pos)
            return node
        raise ExprSyntaxError(f"unexpected token {t.text!r}", t.pos)


def parse(text, variables=None):
    """Parse ``text`` into an Expr.

    If ``variables`` is given, every identifier must be in it.
    """
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    parser = _Parser(_tokenize(text), set(variables) if variables is not None else None)
    node = parser.parse_expr()
    tail = parser.peek()
    if tail.kind != "end":
        raise ExprSyntaxError(f"unexpected token {tail.text!r}", tail.pos)
    return node


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _apply_fn(fn, x):
    if fn == "sin":
        return math.sin(x)
    if fn == "cos":
        return math.cos(x)
    if fn == "exp":
        return math.exp(x)
    if fn == "ln":
        if x <= 0.0:
            raise ExprDomainError(f"ln of non-positive value {x}")
        return math.log(x)
    if fn == "sqrt":
        if x < 0.0:
            raise ExprDomainError(f"sqrt of negative value {x}")
        return math.sqrt(x)
    raise UnknownIdentifierError(f"unknown function {fn!r}")


def _pow(base, exponent):
    if abs(exponent - round(exponent)) <= _INT_EXP_TOL:
        return base ** int(round(exponent))
    if base <= 0.0:
        raise ExprDomainError(
            f"non-integer power {exponent} of non-positive base {base}"
        )
    return base ** exponent


def evaluate(e, env):
    """Evaluate ``e`` with the variable bindings in ``env`` (a mapping)."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise MissingBindingError(f"no binding for {e.name!r}") from None
    if isinstance(e, Neg):
        return -evaluate(e.arg, env)
    if isinstance(e, Call):
        return _apply_fn(e.fn, evaluate(e.arg, env))
    l = evaluate(e.left, env)
    r = evaluate(e.right, env)
    if e.op == "+":
        return l + r
    if e.op == "-":
        return l - r
    if e.op == "*":
        return l * r
    if e.op == "/":
        if r == 0.0:
            raise ExprDomainError("division by zero")
        return l / r
    return _pow(l, r)


def free_vars(e):
    if isinstance(e, Const):
        return set()
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, (Neg, Call)):
        return free_vars(e.arg)
    return free_vars(e.left) | free_vars(e.right)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def differentiate(e, v):
    """Exact partial derivative of ``e`` with respect to variable ``v``."""
    if not isinstance(v, str) or not v.isidentifier():
        raise UnknownIdentifierError(f"invalid variable name {v!r}")
    if isinstance(e, Const):
        return Const(0.0)
    if isinstance(e, Var):
        return Const(1.0) if e.name == v else Const(0.0)
    if isinstance(e, Neg):
        return Neg(differentiate(e.arg, v))
    if isinstance(e, Call):
        du = differentiate(e.arg, v)
        u = e.arg
        if e.fn == "sin":
            outer = Call("cos", u)
        elif e.fn == "cos":
            outer = Neg(Call("sin", u))
        elif e.fn == "exp":
            outer = Call("exp", u)
        elif e.fn == "ln":
            outer = Bin("/", Const(1.0), u)
        elif e.fn == "sqrt":
            outer = Bin("/", Const(0.5), Call("sqrt", u))
        else:
            raise UnknownIdentifierError(f"unknown function {e.fn!r}")
        return constant_fold(Bin("*", outer, du))
    dl = differentiate(e.left, v)
    dr = differentiate(e.right, v)
    if e.op in ("+", "-"):
        return constant_fold(Bin(e.op, dl, dr))
    if e.op == "*":
        return constant_fold(
            Bin("+", Bin("*", dl, e.right), Bin("*", e.left, dr))
        )
    if e.op == "/":
        num = Bin("-", Bin("*", dl, e.right), Bin("*", e.left, dr))
        return constant_fold(Bin("/", num, Bin("^", e.right, Const(2.0))))
    # power with constant exponent
    c = e.right.value
    lowered = Bin("^", e.left, Const(c - 1.0))
    return constant_fold(Bin("*", Bin("*", Const(c), lowered), dl))


# ---------------------------------------------------------------------------
# Constant folding, printing, compilation
# ---------------------------------------------------------------------------

def constant_fold(e):
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Neg):
        a = constant_fold(e.arg)
        if isinstance(a, Const):
            return Const(-a.value)
        return Neg(a)
    if isinstance(e, Call):
        a = constant_fold(e.arg)
        if isinstance(a, Const):
            return Const(_apply_fn(e.fn, a.value))
        return Call(e.fn, a)
    l = constant_fold(e.left)
    r = constant_fold(e.right)
    if isinstance(l, Const) and isinstance(r, Const):
        return Const(evaluate(Bin(e.op, l, r), {}))
    # cheap algebraic identities keep derivative trees small
    if e.op == "*":
        if (isinstance(l, Const) and l.value == 0.0) or (
            isinstance(r, Const) and r.value == 0.0
        ):
            return Const(0.0)
        if isinstance(l, Const) and l.value == 1.0:
            return r
        if isinstance(r, Const) and r.value == 1.0:
            return l
    if e.op == "+":
        if isinstance(l, Const) and l.value == 0.0:
            return r
        if isinstance(r, Const) and r.value == 0.0:
            return l
    if e.op == "-":
        if isinstance(r, Const) and r.value == 0.0:
            return l
    if e.op == "/":
        if isinstance(l, Const) and l.value == 0.0:
            return Const(0.0)
        if isinstance(r, Const) and r.value == 1.0:
            return l
    if e.op == "^":
        if isinstance(r, Const) and r.value == 1.0:
            return l
        if isinstance(r, Const) and r.value == 0.0:
            return Const(1.0)
    return Bin(e.op, l, r)


def to_str(e):
    """Render ``e`` so that parse(to_str(e)) evaluates identically."""
    if isinstance(e, Const):
        # parenthesize negative literals so they survive under `^`
        return repr(e.value) if e.value >= 0 else f"({e.value!r})"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_str(e.arg)})"
    if isinstance(e, Call):
        return f"{e.fn}({to_str(e.arg)})"
    return f"({to_str(e.left)} {e.op} {to_str(e.right)})"


_COMPILE_GLOBALS = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "__builtins__": {},
}


def _pysrc(e):
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{_pysrc(e.arg)})"
    if isinstance(e, Call):
        fn = "log" if e.fn == "ln" else e.fn
        return f"{fn}({_pysrc(e.arg)})"
    if e.op == "^":
        c = e.right.value
        if abs(c - round(c)) <= _INT_EXP_TOL:
            return f"({_pysrc(e.left)} ** {int(round(c))})"
        return f"({_pysrc(e.left)} ** {c!r})"
    return f"({_pysrc(e.left)} {e.op} {_pysrc(e.right)})"


def compile_fn(e, arg_names):
    """Compile ``e`` to a plain Python function of ``arg_names``.

    The compiled form trades the evaluator's explicit domain errors for
    speed; it is used inside integrator loops where the domain has been
    validated up front.  Out-of-domain input raises the underlying
    ValueError/ZeroDivisionError.
    """
    e = constant_fold(e)
    missing = free_vars(e) - set(arg_names)
    if missing:
        raise MissingBindingError(f"unbound variables {sorted(missing)}")
    src = f"lambda {', '.join(arg_names)}: {_pysrc(e)}"
    return eval(src, dict(_COMPILE_GLOBALS))
