"""Arithmetic expressions in one variable ``x``.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right associative, -x^2 == -(x^2)
    atom   := NUMBER | 'x' | FUNC '(' expr ')' | '(' expr ')'

with ``FUNC`` one of sin, cos, exp, tanh, abs.  A parsed expression is kept
as an immutable tree and, for the simulation kernels, as a postfix program
run by :func:`eval_program`.
"""
from dataclasses import dataclass, field
import re

import numpy as np
from numba import njit

FUNCTIONS = ("sin", "cos", "exp", "tanh", "abs")

# postfix opcodes
OP_X, OP_CONST, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW, OP_IPOW, OP_NEG = range(9)
OP_SIN, OP_COS, OP_EXP, OP_TANH, OP_ABS = range(9, 14)
_FUNC_OPS = dict(zip(FUNCTIONS, range(OP_SIN, OP_ABS + 1)))
_BIN_OPS = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}
_NP_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "tanh": np.tanh, "abs": np.abs}


class ExpressionError(ValueError):
    """Syntax or evaluation error; ``offset`` is the byte offset into the source, if known."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    pass


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    name: str
    arg: object


_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(\S))")


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            break  # trailing whitespace
        start = m.start(m.lastindex)
        if m.group(1) is not None:
            tokens.append(("num", m.group(1), start))
        elif m.group(2) is not None:
            tokens.append(("name", m.group(2), start))
        else:
            ch = m.group(3)
            if ch not in "+-*/^(),":
                raise ExpressionError(f"unexpected character {ch!r}", start)
            tokens.append(("op", ch, start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind != "op":
            raise ExpressionError(f"expected {value!r}, found {text or 'end of input'!r}", pos)

    def parse(self):
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExpressionError(f"unexpected {text!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        node = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            node = BinOp("^", node, self.unary())
        return node

    def atom(self):
        kind, text, pos = self.take()
        if kind == "num":
            value = float(text)
            if not np.isfinite(value):
                raise ExpressionError(f"literal {text!r} overflows", pos)
            return Num(value)
        if kind == "name":
            if text == "x":
                return Var()
            if text not in FUNCTIONS:
                raise ExpressionError(f"unknown identifier {text!r}", pos)
            if self.peek()[:2] != ("op", "("):
                raise ExpressionError(f"function {text!r} takes exactly 1 argument, got 0", pos)
            self.take()
            if self.peek()[:2] == ("op", ")"):
                raise ExpressionError(f"function {text!r} takes exactly 1 argument, got 0", pos)
            arg = self.expr()
            nargs = 1
            while self.peek()[:2] == ("op", ","):
                self.take()
                self.expr()
                nargs += 1
            if nargs != 1:
                raise ExpressionError(f"function {text!r} takes exactly 1 argument, got {nargs}", pos)
            self.expect(")")
            return Call(text, arg)
        if (kind, text) == ("op", "("):
            node = self.expr()
            self.expect(")")
            return node
        raise ExpressionError(f"unexpected {text or 'end of input'!r}", pos)


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def unparse(node):
    """Render a tree with the minimal parentheses needed to parse back to the same tree."""
    if isinstance(node, Num):
        v = node.value
        if v == int(v) and abs(v) < 1e15:
            return str(int(v))
        return repr(v)
    if isinstance(node, Var):
        return "x"
    if isinstance(node, Call):
        return f"{node.name}({unparse(node.arg)})"
    if isinstance(node, Neg):
        inner = unparse(node.arg)
        if isinstance(node.arg, BinOp) and node.arg.op != "^":
            inner = f"({inner})"
        return f"-{inner}"
    prec = _PREC[node.op]
    left = unparse(node.left)
    right = unparse(node.right)
    if node.op == "^":
        if isinstance(node.left, (BinOp, Neg)):
            left = f"({left})"
        if isinstance(node.right, BinOp) and node.right.op != "^":
            right = f"({right})"
        return f"{left}^{right}"
    if isinstance(node.left, BinOp) and _PREC[node.left.op] < prec:
        left = f"({left})"
    if isinstance(node.right, BinOp) and _PREC[node.right.op] <= prec:
        right = f"({right})"
    elif isinstance(node.right, Neg):
        right = f"({right})"
    return f"{left} {node.op} {right}"


def _evaluate(node, x):
    if isinstance(node, Num):
        return np.full_like(x, node.value)
    if isinstance(node, Var):
        return x
    if isinstance(node, Neg):
        return -_evaluate(node.arg, x)
    if isinstance(node, Call):
        return _NP_FUNCS[node.name](_evaluate(node.arg, x))
    a = _evaluate(node.left, x)
    b = _evaluate(node.right, x)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        return a / b
    return np.power(a, b)


def _compile(node, ops, args, consts):
    if isinstance(node, Num):
        ops.append(OP_CONST)
        args.append(len(consts))
        consts.append(node.value)
    elif isinstance(node, Var):
        ops.append(OP_X)
        args.append(0)
    elif isinstance(node, Neg):
        _compile(node.arg, ops, args, consts)
        ops.append(OP_NEG)
        args.append(0)
    elif isinstance(node, Call):
        _compile(node.arg, ops, args, consts)
        ops.append(_FUNC_OPS[node.name])
        args.append(0)
    elif (node.op == "^" and isinstance(node.right, Num)
          and node.right.value == int(node.right.value) and 0 <= node.right.value <= 16):
        # small integer powers by repeated multiplication
        _compile(node.left, ops, args, consts)
        ops.append(OP_IPOW)
        args.append(int(node.right.value))
    else:
        _compile(node.left, ops, args, consts)
        _compile(node.right, ops, args, consts)
        ops.append(_BIN_OPS[node.op])
        args.append(0)


def _depth(node):
    if isinstance(node, (Num, Var)):
        return 1
    if isinstance(node, (Neg, Call)):
        return _depth(node.arg)
    return max(_depth(node.left), 1 + _depth(node.right))


@dataclass(frozen=True)
class ScalarFunction:
    """A parsed function of ``x``; call it on floats or arrays."""

    tree: object
    source: str = field(default="", compare=False)

    def __call__(self, x):
        arr = np.asarray(x, dtype=float)
        with np.errstate(all="ignore"):
            out = _evaluate(self.tree, arr)
        if not np.all(np.isfinite(out[np.isfinite(arr)])):
            raise ExpressionError(f"non-finite value of {self.text!r}")
        return out if out.ndim else float(out)

    @property
    def text(self):
        return unparse(self.tree)

    @property
    def program(self):
        """``(ops, args, consts)`` arrays for :func:`eval_program`."""
        if self.stack_depth > STACK_SIZE:
            raise ExpressionError(f"expression nests deeper than {STACK_SIZE} levels")
        ops, args, consts = [], [], []
        _compile(self.tree, ops, args, consts)
        return (np.array(ops, dtype=np.int64), np.array(args, dtype=np.int64),
                np.array(consts + [0.0], dtype=np.float64))

    @property
    def stack_depth(self):
        return _depth(self.tree)

    def derivative(self, x, h=1e-5):
        """Central difference derivative."""
        x = np.asarray(x, dtype=float)
        return (self(x + h) - self(x - h)) / (2 * h)

    def __str__(self):
        return self.text


def parse_function(text):
    """Parse ``text`` into a :class:`ScalarFunction`.

    >>> parse_function("x + x^3")(0.5)
    0.625
    """
    if not isinstance(text, str) or not text.strip():
        raise ExpressionError("empty expression", 0)
    return ScalarFunction(_Parser(text).parse(), source=text)


STACK_SIZE = 64


@njit(cache=True, inline="always")
def eval_program(prog, x, stack):
    """Evaluate a compiled program at scalar ``x`` using the scratch ``stack``."""
    ops, args, consts = prog
    if ops.shape[0] == 1:
        # constant and identity functions are common enough to skip the stack
        return x if ops[0] == OP_X else consts[0]
    sp = 0
    for i in range(ops.shape[0]):
        op = ops[i]
        if op == OP_X:
            stack[sp] = x
            sp += 1
        elif op == OP_CONST:
            stack[sp] = consts[args[i]]
            sp += 1
        elif op == OP_IPOW:
            base = stack[sp - 1]
            r = 1.0
            for _ in range(args[i]):
                r *= base
            stack[sp - 1] = r
        elif op == OP_NEG:
            stack[sp - 1] = -stack[sp - 1]
        elif op >= OP_SIN:
            v = stack[sp - 1]
            if op == OP_SIN:
                v = np.sin(v)
            elif op == OP_COS:
                v = np.cos(v)
            elif op == OP_EXP:
                v = np.exp(v)
            elif op == OP_TANH:
                v = np.tanh(v)
            else:
                v = abs(v)
            stack[sp - 1] = v
        else:
            b = stack[sp - 1]
            a = stack[sp - 2]
            sp -= 1
            if op == OP_ADD:
                a = a + b
            elif op == OP_SUB:
                a = a - b
            elif op == OP_MUL:
                a = a * b
            elif op == OP_DIV:
                a = a / b
            else:
                a = a ** b
            stack[sp - 1] = a
    return stack[0]


@njit(cache=True)
def eval_program_array(prog, xs):
    stack = np.empty(STACK_SIZE)
    out = np.empty_like(xs)
    for i in range(xs.shape[0]):
        out[i] = eval_program(prog, xs[i], stack)
    return out
