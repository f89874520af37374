"""Parser and canonical formatter for the replicated SQL subset.

Supported::

    CREATE TABLE t (id INT, name TEXT, ...)
    INSERT INTO t [(col, ...)] VALUES (v, ...)[, (v, ...)]
    UPDATE t SET col = v[, col = v] [WHERE col = v [AND col = v ...]]
    DELETE FROM t [WHERE col = v [AND col = v ...]]

Keywords are case-insensitive, identifiers case-sensitive. Values are
64-bit integers or single-quoted strings (``''`` escapes a quote). The first
column of a table is its primary key.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from qsync.errors import SQLSyntaxError, UnsupportedConstruct

INT_MIN, INT_MAX = -(2**63), 2**63 - 1

KEYWORDS = {
    "CREATE", "TABLE", "INSERT", "INTO", "VALUES", "UPDATE", "SET", "WHERE",
    "AND", "DELETE", "FROM", "INT", "TEXT",
}
# recognised only to give a precise UnsupportedConstruct
UNSUPPORTED_WORDS = {
    "SELECT", "DROP", "ALTER", "JOIN", "OR", "NOT", "NULL", "LIKE", "IN",
    "BETWEEN", "IS", "UNION", "TRUNCATE", "MERGE", "REPLACE", "GRANT",
    "REVOKE", "WITH", "ORDER", "GROUP", "HAVING", "LIMIT", "EXISTS", "ON",
    "INNER", "LEFT", "RIGHT", "OUTER", "PRIMARY", "KEY", "INDEX", "VIEW",
    "BEGIN", "COMMIT", "ROLLBACK",
}
COLUMN_TYPES = ("INT", "TEXT")

Value = Union[int, str]


@dataclass(frozen=True)
class CreateTable:
    table: str
    columns: tuple[tuple[str, str], ...]
    kind = "CREATE"


@dataclass(frozen=True)
class Insert:
    table: str
    columns: tuple[str, ...] | None
    rows: tuple[tuple[Value, ...], ...]
    kind = "INSERT"


@dataclass(frozen=True)
class Update:
    table: str
    assignments: tuple[tuple[str, Value], ...]
    where: tuple[tuple[str, Value], ...]
    kind = "UPDATE"


@dataclass(frozen=True)
class Delete:
    table: str
    where: tuple[tuple[str, Value], ...]
    kind = "DELETE"


Statement = Union[CreateTable, Insert, Update, Delete]


@dataclass(frozen=True)
class Token:
    type: str  # WORD, INT, STR, PUNCT, OP, EOF
    value: object
    pos: int


_PUNCT = set("(),=;*")
_OP_CHARS = set("<>!")


def tokenize(text: str) -> list[Token]:
    toks: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c.isascii() and (c.isalpha() or c == "_"):
            j = i + 1
            while j < n and text[j].isascii() and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(Token("WORD", text[i:j], i))
            i = j
        elif c.isascii() and c.isdigit() or (c == "-" and i + 1 < n and text[i + 1].isascii() and text[i + 1].isdigit()):
            j = i + 1
            while j < n and text[j].isascii() and text[j].isdigit():
                j += 1
            value = int(text[i:j])
            if not INT_MIN <= value <= INT_MAX:
                raise SQLSyntaxError(i, {"64-bit integer"}, f"integer out of range at {i}")
            toks.append(Token("INT", value, i))
            i = j
        elif c == "'":
            j = i + 1
            buf = []
            while True:
                if j >= n:
                    raise SQLSyntaxError(i, {"closing quote"}, f"unterminated string at {i}")
                if text[j] == "'":
                    if j + 1 < n and text[j + 1] == "'":
                        buf.append("'")
                        j += 2
                        continue
                    break
                buf.append(text[j])
                j += 1
            toks.append(Token("STR", "".join(buf), i))
            i = j + 1
        elif c in _OP_CHARS:
            j = i + 1
            while j < n and text[j] in _OP_CHARS | {"="}:
                j += 1
            toks.append(Token("OP", text[i:j], i))
            i = j
        elif c in _PUNCT:
            toks.append(Token("PUNCT", c, i))
            i += 1
        else:
            raise SQLSyntaxError(i, {"token"}, f"unexpected character {c!r} at {i}")
    toks.append(Token("EOF", None, n))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def advance(self) -> Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def fail(self, expected) -> None:
        t = self.tok
        if t.type == "WORD" and t.value.upper() in UNSUPPORTED_WORDS:
            raise UnsupportedConstruct(t.pos, t.value.upper())
        if t.type == "OP" or (t.type == "PUNCT" and t.value == "*"):
            raise UnsupportedConstruct(t.pos, f"operator {t.value}")
        if t.type == "PUNCT" and t.value == "(" and self.toks[self.i + 1].type == "WORD" \
                and str(self.toks[self.i + 1].value).upper() == "SELECT":
            raise UnsupportedConstruct(t.pos, "subquery")
        raise SQLSyntaxError(t.pos, expected)

    def is_kw(self, kw: str) -> bool:
        return self.tok.type == "WORD" and self.tok.value.upper() == kw

    def kw(self, kw: str) -> None:
        if not self.is_kw(kw):
            self.fail({kw})
        self.advance()

    def punct(self, p: str) -> None:
        if not (self.tok.type == "PUNCT" and self.tok.value == p):
            self.fail({repr(p)})
        self.advance()

    def is_punct(self, p: str) -> bool:
        return self.tok.type == "PUNCT" and self.tok.value == p

    def ident(self) -> str:
        t = self.tok
        if t.type != "WORD" or t.value.upper() in KEYWORDS or t.value.upper() in UNSUPPORTED_WORDS:
            self.fail({"identifier"})
        if len(t.value) > 64:
            raise SQLSyntaxError(t.pos, {"identifier"}, f"identifier too long at {t.pos}")
        self.advance()
        return t.value

    def value(self) -> Value:
        t = self.tok
        if t.type not in ("INT", "STR"):
            self.fail({"integer", "string"})
        self.advance()
        return t.value

    def statement(self) -> Statement:
        t = self.tok
        if self.is_kw("CREATE"):
            stmt = self.create()
        elif self.is_kw("INSERT"):
            stmt = self.insert()
        elif self.is_kw("UPDATE"):
            stmt = self.update()
        elif self.is_kw("DELETE"):
            stmt = self.delete()
        else:
            if t.type == "EOF":
                raise SQLSyntaxError(t.pos, {"CREATE", "INSERT", "UPDATE", "DELETE"})
            self.fail({"CREATE", "INSERT", "UPDATE", "DELETE"})
        if self.is_punct(";"):
            self.advance()
        if self.tok.type != "EOF":
            self.fail({"end of statement"})
        return stmt

    def create(self) -> CreateTable:
        self.kw("CREATE")
        self.kw("TABLE")
        table = self.ident()
        self.punct("(")
        cols = []
        while True:
            pos = self.tok.pos
            name = self.ident()
            if any(name == c for c, _ in cols):
                raise SQLSyntaxError(pos, {"distinct column names"}, f"duplicate column {name!r} at {pos}")
            t = self.tok
            if not (t.type == "WORD" and t.value.upper() in COLUMN_TYPES):
                self.fail(set(COLUMN_TYPES))
            self.advance()
            cols.append((name, t.value.upper()))
            if self.is_punct(","):
                self.advance()
                continue
            self.punct(")")
            break
        return CreateTable(table, tuple(cols))

    def insert(self) -> Insert:
        self.kw("INSERT")
        self.kw("INTO")
        table = self.ident()
        columns = None
        if self.is_punct("("):
            self.advance()
            columns = []
            while True:
                pos = self.tok.pos
                col = self.ident()
                if col in columns:
                    raise SQLSyntaxError(pos, {"distinct column names"}, f"duplicate column {col!r} at {pos}")
                columns.append(col)
                if not self.is_punct(","):
                    break
                self.advance()
            self.punct(")")
        self.kw("VALUES")
        rows = [self.tuple_()]
        while self.is_punct(","):
            self.advance()
            rows.append(self.tuple_())
        return Insert(table, tuple(columns) if columns is not None else None, tuple(rows))

    def tuple_(self) -> tuple[Value, ...]:
        self.punct("(")
        vals = [self.value()]
        while self.is_punct(","):
            self.advance()
            vals.append(self.value())
        self.punct(")")
        return tuple(vals)

    def equality(self) -> tuple[str, Value]:
        col = self.ident()
        self.punct("=")
        return col, self.value()

    def where(self) -> tuple[tuple[str, Value], ...]:
        if not self.is_kw("WHERE"):
            return ()
        self.advance()
        preds = [self.equality()]
        while self.is_kw("AND"):
            self.advance()
            preds.append(self.equality())
        return tuple(preds)

    def update(self) -> Update:
        self.kw("UPDATE")
        table = self.ident()
        self.kw("SET")
        assigns = []
        while True:
            pos = self.tok.pos
            col, value = self.equality()
            if any(col == c for c, _ in assigns):
                raise SQLSyntaxError(pos, {"distinct columns"}, f"column {col!r} assigned twice at {pos}")
            assigns.append((col, value))
            if not self.is_punct(","):
                break
            self.advance()
        return Update(table, tuple(assigns), self.where())

    def delete(self) -> Delete:
        self.kw("DELETE")
        self.kw("FROM")
        table = self.ident()
        return Delete(table, self.where())


def parse_statement(text: str) -> Statement:
    """Parse one statement; raises SQLSyntaxError or UnsupportedConstruct."""
    if not isinstance(text, str):
        raise TypeError("statement text must be str")
    return _Parser(text).statement()


def format_value(v: Value) -> str:
    if isinstance(v, int):
        return str(v)
    return "'" + v.replace("'", "''") + "'"


def _preds(preds) -> str:
    return " AND ".join(f"{c} = {format_value(v)}" for c, v in preds)


def format_statement(stmt: Statement) -> str:
    """Canonical text; parse(format(s)) == s for every parsed statement."""
    if isinstance(stmt, CreateTable):
        cols = ", ".join(f"{c} {t}" for c, t in stmt.columns)
        return f"CREATE TABLE {stmt.table} ({cols})"
    if isinstance(stmt, Insert):
        cols = f" ({', '.join(stmt.columns)})" if stmt.columns is not None else ""
        rows = ", ".join("(" + ", ".join(format_value(v) for v in r) + ")" for r in stmt.rows)
        return f"INSERT INTO {stmt.table}{cols} VALUES {rows}"
    if isinstance(stmt, Update):
        sets = ", ".join(f"{c} = {format_value(v)}" for c, v in stmt.assignments)
        where = f" WHERE {_preds(stmt.where)}" if stmt.where else ""
        return f"UPDATE {stmt.table} SET {sets}{where}"
    if isinstance(stmt, Delete):
        where = f" WHERE {_preds(stmt.where)}" if stmt.where else ""
        return f"DELETE FROM {stmt.table}{where}"
    raise TypeError(f"not a statement: {stmt!r}")


def canonical(text: str) -> str:
    return format_statement(parse_statement(text))
