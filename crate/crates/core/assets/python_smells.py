#!/usr/bin/env python3
"""Report Python code smells for one file as a JSON list on stdout.

Each finding is {"rule", "line", "end_line", "message", "severity"}.
Exit status is 0 with no findings, 1 with findings, 2 on a syntax error
(reported as a finding), 3 on usage errors.
"""
import argparse
import ast
import json
import sys

RANKS = [
    (5, "A", "low - simple block"),
    (10, "B", "low - well structured and stable block"),
    (20, "C", "moderate - slightly complex block"),
    (30, "D", "more than moderate - more complex block"),
    (40, "E", "high - complex block, alarming"),
]


def cc_rank(score):
    for upper, rank, risk in RANKS:
        if score <= upper:
            return rank, risk
    return "F", "very high - error-prone, unstable block"


class Complexity(ast.NodeVisitor):
    """Cyclomatic complexity of one function body, nested defs excluded."""

    def __init__(self):
        self.score = 1

    def visit_FunctionDef(self, node):
        pass

    visit_AsyncFunctionDef = visit_FunctionDef
    visit_ClassDef = visit_FunctionDef

    def visit_If(self, node):
        self.score += 1
        self.generic_visit(node)

    visit_IfExp = visit_If
    visit_Assert = visit_If

    def _loop(self, node):
        self.score += 1 + (1 if node.orelse else 0)
        self.generic_visit(node)

    visit_For = visit_AsyncFor = visit_While = _loop

    def visit_Try(self, node):
        self.score += len(node.handlers) + (1 if node.orelse else 0)
        self.generic_visit(node)

    visit_TryStar = visit_Try

    def visit_BoolOp(self, node):
        self.score += len(node.values) - 1
        self.generic_visit(node)

    def visit_comprehension(self, node):
        self.score += 1 + len(node.ifs)
        self.generic_visit(node)

    def visit_match_case(self, node):
        self.score += 1
        self.generic_visit(node)


def function_complexity(fn):
    v = Complexity()
    for stmt in fn.body:
        v.visit(stmt)
    return v.score


def branch_depth(node, depth=0):
    deepest = depth
    for child in ast.iter_child_nodes(node):
        if isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            continue
        d = depth + 1 if isinstance(child, ast.If) else depth
        deepest = max(deepest, branch_depth(child, d))
    return deepest


def elif_chain(node):
    n = 1
    while len(node.orelse) == 1 and isinstance(node.orelse[0], ast.If):
        node = node.orelse[0]
        n += 1
    return n + (1 if node.orelse else 0)


def self_attrs(fn):
    attrs = set()
    for n in ast.walk(fn):
        if isinstance(n, ast.Attribute) and isinstance(n.value, ast.Name) and n.value.id == "self":
            attrs.add(n.attr)
    return attrs


def lcom4(methods):
    """Connected components of methods linked by shared self attributes."""
    uses = [self_attrs(m) for m in methods]
    uses = [u for u in uses if u]
    parent = list(range(len(uses)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(uses)):
        for j in range(i + 1, len(uses)):
            if uses[i] & uses[j]:
                parent[find(i)] = find(j)
    return len({find(i) for i in range(len(uses))}), len(uses)


def analyze(source, args):
    findings = []

    def add(rule, node, message, severity="warning"):
        findings.append({
            "rule": rule,
            "line": node.lineno,
            "end_line": getattr(node, "end_lineno", None) or node.lineno,
            "message": message,
            "severity": severity,
        })

    tree = ast.parse(source)
    for node in ast.walk(tree):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            a = node.args
            params = [p.arg for p in a.posonlyargs + a.args + a.kwonlyargs]
            params = [p for p in params if p not in ("self", "cls")]
            params += [p.arg for p in (a.vararg, a.kwarg) if p is not None]
            if len(params) > args.max_params:
                add("long-parameter-list", node,
                    f"Function `{node.name}` has {len(params)} parameters (more than {args.max_params})")
            length = node.end_lineno - node.lineno + 1
            if length > args.max_method_lines:
                add("long-method", node,
                    f"Function `{node.name}` is {length} lines long (more than {args.max_method_lines})")
            score = function_complexity(node)
            rank, risk = cc_rank(score)
            if rank >= "C":
                add("code-complexity", node,
                    f"Function `{node.name}` has cyclomatic complexity {score} (rank {rank}: {risk})")
            depth = branch_depth(node)
            if depth > args.max_branch_depth:
                add("long-branch", node,
                    f"Function `{node.name}` nests conditionals {depth} levels deep")
        elif isinstance(node, ast.ClassDef):
            methods = [n for n in node.body if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef))]
            attrs = set()
            for m in methods:
                attrs |= self_attrs(m)
            attrs -= {m.name for m in methods}
            for n in node.body:
                if isinstance(n, ast.Assign):
                    attrs |= {t.id for t in n.targets if isinstance(t, ast.Name)}
                elif isinstance(n, ast.AnnAssign) and isinstance(n.target, ast.Name):
                    attrs.add(n.target.id)
            if len(methods) > args.max_methods:
                add("many-methods", node,
                    f"Class `{node.name}` has {len(methods)} methods (more than {args.max_methods})")
            if len(attrs) > args.max_attributes:
                add("many-attributes", node,
                    f"Class `{node.name}` has {len(attrs)} attributes (more than {args.max_attributes})")
            components, users = lcom4(methods)
            if users >= 3 and components > 1:
                add("class-cohesion", node,
                    f"Class `{node.name}` has low cohesion ({components} unrelated method groups)")
        elif isinstance(node, ast.If) and not getattr(node, "_in_chain", False):
            n = node
            while len(n.orelse) == 1 and isinstance(n.orelse[0], ast.If):
                n.orelse[0]._in_chain = True
                n = n.orelse[0]
            branches = elif_chain(node)
            if branches > args.max_branches:
                add("long-branch", node,
                    f"Conditional has {branches} branches (more than {args.max_branches})")
        elif isinstance(node, ast.Lambda):
            text = ast.get_source_segment(source, node) or ""
            if len(text) > args.max_lambda_chars:
                add("long-lambda", node,
                    f"Lambda is {len(text)} characters long (more than {args.max_lambda_chars})")
        elif isinstance(node, ast.ListComp):
            text = ast.get_source_segment(source, node) or ""
            if len(text) > args.max_comprehension_chars:
                add("long-list-comprehension", node,
                    f"List comprehension is {len(text)} characters long (more than {args.max_comprehension_chars})")
    findings.sort(key=lambda f: (f["line"], f["rule"], f["message"]))
    return findings


def main():
    p = argparse.ArgumentParser()
    p.add_argument("file")
    p.add_argument("--max-params", type=int, default=6)
    p.add_argument("--max-method-lines", type=int, default=100)
    p.add_argument("--max-branch-depth", type=int, default=3)
    p.add_argument("--max-branches", type=int, default=10)
    p.add_argument("--max-methods", type=int, default=20)
    p.add_argument("--max-attributes", type=int, default=15)
    p.add_argument("--max-lambda-chars", type=int, default=80)
    p.add_argument("--max-comprehension-chars", type=int, default=80)
    args = p.parse_args()
    try:
        with open(args.file, encoding="utf-8") as fh:
            source = fh.read()
    except OSError as e:
        print(str(e), file=sys.stderr)
        return 3
    try:
        findings = analyze(source, args)
    except SyntaxError as e:
        line = e.lineno or 1
        json.dump([{"rule": "syntax-error", "line": line, "end_line": line,
                    "message": f"Syntax error: {e.msg}", "severity": "error"}], sys.stdout)
        return 2
    json.dump(findings, sys.stdout)
    return 1 if findings else 0


if __name__ == "__main__":
    sys.exit(main())
