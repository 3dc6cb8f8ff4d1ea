"""Parameter and multiply-add accounting.

Counting conventions (shared with the runtime counter in :mod:`convbert.tensor`):
a matrix product ``[m, k] @ [k, n]`` costs ``m*k*n``; a convolution costs
``n * channels * k``; every elementwise op, softmax, layer norm and activation
costs one unit per output element; lookups and reshapes are free.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .encoder import ModelConfig, param_shapes


@dataclass
class CostReport:
    name: str
    own_params: int = 0
    own_madds: int = 0
    children: list["CostReport"] = field(default_factory=list)

    @property
    def params(self) -> int:
        if not self.children:
            return self.own_params
        return sum(c.params for c in self.children)

    @property
    def madds(self) -> int:
        if not self.children:
            return self.own_madds
        return sum(c.madds for c in self.children)

    def child(self, name: str) -> "CostReport":
        for c in self.children:
            if c.name == name:
                return c
        node = CostReport(name)
        self.children.append(node)
        return node

    def find(self, path: str) -> "CostReport":
        node = self
        for part in path.split("."):
            matches = [c for c in node.children if c.name == part]
            if not matches:
                raise KeyError(path)
            node = matches[0]
        return node

    def add(self, path: str, params: int = 0, madds: int = 0) -> None:
        node = self
        for part in path.split("."):
            node = node.child(part)
        node.own_params += int(params)
        node.own_madds += int(madds)

    def walk(self, prefix: str = ""):
        """Yield ``(path, node)`` for every descendant, depth first."""
        for c in self.children:
            path = f"{prefix}{c.name}"
            yield path, c
            yield from c.walk(path + ".")

    def leaves(self) -> dict[str, "CostReport"]:
        return {p: n for p, n in self.walk() if not n.children}

    def sum_matching(self, suffix: str) -> int:
        return sum(n.madds for p, n in self.leaves().items() if p.endswith(suffix))

    def to_text(self) -> str:
        lines = [f"{self.name}  params={self.params:,}  madds={self.madds:,}"]

        def rec(node, depth):
            for c in node.children:
                lines.append(f"{'  ' * depth}{c.name:<{max(1, 28 - 2 * depth)}} params={c.params:>14,}  madds={c.madds:>16,}")
                rec(c, depth + 1)

        rec(self, 1)
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "params", "madds"])
        w.writerow([self.name, self.params, self.madds])
        for path, node in self.walk(self.name + "."):
            w.writerow([path, node.params, node.madds])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CostReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty cost report")
        root = cls(rows[0]["component"])
        paths = [r["component"] for r in rows[1:]]
        for r in rows[1:]:
            path = r["component"]
            is_leaf = not any(p.startswith(path + ".") for p in paths)
            rel = path[len(root.name) + 1:]
            if is_leaf:
                root.add(rel, int(r["params"]), int(r["madds"]))
            else:
                root.add(rel)
        if root.params != int(rows[0]["params"]) or root.madds != int(rows[0]["madds"]):
            raise ValueError("cost report totals do not match their components")
        return root


def _param_component(name: str) -> str:
    """Map a parameter name to the report path that owns it."""
    if name.startswith("embeddings."):
        leaf = name.split(".", 1)[1]
        return "embeddings." + {
            "word": "word",
            "proj_w": "projection",
            "proj_b": "projection",
            "position": "position",
            "segment": "segment",
            "ln_g": "norm",
            "ln_b": "norm",
        }[leaf]
    layer, rest = name.split(".", 1)
    if rest.startswith("attn."):
        leaf = rest[5:]
        part = {
            "wq": "qkv", "bq": "qkv", "wk": "qkv", "bk": "qkv", "wv": "qkv", "bv": "qkv",
            "w_dw": "span_key", "w_pw": "span_key", "b_pw": "span_key",
            "w_f": "sdconv", "b_f": "sdconv", "wcv": "sdconv", "bcv": "sdconv",
            "wo": "output", "bo": "output",
        }[leaf]
        return f"{layer}.attention.{part}"
    if rest.startswith("attn_ln"):
        return f"{layer}.attention_norm"
    if rest.startswith("ffn."):
        return f"{layer}.ffn"
    return f"{layer}.ffn_norm"


def count_params(cfg: ModelConfig) -> CostReport:
    """Exact learnable-scalar count of the encoder, grouped by component."""
    report = CostReport("model")
    for name, shape in param_shapes(cfg):
        size = 1
        for s in shape:
            size *= s
        report.add(_param_component(name), params=size)
    return report


def count_flops(cfg: ModelConfig, n: int, batch: int = 1) -> CostReport:
    """Multiply-adds of one unmasked forward pass over ``batch`` sequences of length ``n``.

    The returned report also carries parameter counts on the same tree.
    """
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    report = count_params(cfg)
    a = cfg.attention
    d, db, k, f, g = cfg.d, a.d_b, cfg.k, cfg.ffn_inner, cfg.ffn_groups
    ha = a.attn_heads
    tok = batch * n

    report.add("embeddings.word")
    if cfg.d_emb != d:
        report.add("embeddings.projection", madds=tok * cfg.d_emb * d + tok * d)
    report.add("embeddings.position", madds=tok * d)
    report.add("embeddings.segment", madds=tok * d)
    report.add("embeddings.norm", madds=tok * d)

    out_width = 2 * db if a.use_conv else db
    for i in range(cfg.layers):
        pre = f"layer{i}.attention."
        report.add(pre + "qkv", madds=3 * (tok * d * db + tok * db))
        # score matmul, 1/sqrt(d_head) scaling, softmax
        report.add(pre + "scores", madds=batch * (n * n * db + 2 * ha * n * n))
        report.add(pre + "context", madds=batch * n * n * db)
        if a.use_conv:
            report.add(pre + "span_key", madds=tok * d * k + tok * d * db + tok * db)
            conv = tok * db  # Q * K_s
            conv += tok * db * k  # kernel logits, one d_head x k map per head
            conv += 2 * tok * ha * k  # logit bias, softmax over taps
            conv += tok * db * k  # lightweight convolution
            if a.separate_conv_value:
                conv += tok * d * db + tok * db
            report.add(pre + "sdconv", madds=conv)
        report.add(pre + "output", madds=tok * out_width * d + tok * d)
        report.add(f"layer{i}.attention_norm", madds=2 * tok * d)
        report.add(f"layer{i}.ffn", madds=tok * d * f // g + tok * f + tok * f + tok * f * d // g + tok * d)
        report.add(f"layer{i}.ffn_norm", madds=2 * tok * d)
    return report
