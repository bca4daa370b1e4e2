"""PMI between context and target items, and how well attention tracks it."""
from __future__ import annotations

import csv
import dataclasses
from pathlib import Path

import numpy as np

from .data import SPLIT_CODES, Instances


@dataclasses.dataclass
class PmiTable:
    """Counts over the multiset D of directed (context item k, target item j) pairs.

    keys are target * stride + context, sorted, with matching pair counts.
    Marginals count how often an item appears as a target (#(j)) and as a
    context (#(k)) in D, so both sum to |D|.
    """
    keys: np.ndarray
    pair_counts: np.ndarray
    target_counts: np.ndarray
    context_counts: np.ndarray
    total: int
    stride: int

    def __post_init__(self) -> None:
        if self.total != int(self.pair_counts.sum()):
            raise ValueError("|D| does not match the summed pair counts")

    def __len__(self) -> int:
        return len(self.keys)

    def count(self, target: int, context: int) -> int:
        pos = np.searchsorted(self.keys, target * self.stride + context)
        if pos < len(self.keys) and self.keys[pos] == target * self.stride + context:
            return int(self.pair_counts[pos])
        return 0

    def lookup(self, targets, contexts) -> np.ndarray:
        """PMI per pair; NaN where the pair never occurs in D."""
        key = np.asarray(targets, dtype=np.int64) * self.stride + np.asarray(contexts, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.keys, key), max(len(self.keys) - 1, 0))
        found = self.keys[pos] == key
        out = np.full(key.shape, np.nan)
        out[found] = self.pmi_values()[pos[found]]
        return out

    def pmi(self, target: int, context: int) -> float:
        v = self.lookup([target], [context])[0]
        if np.isnan(v):
            raise KeyError(f"pair ({target}, {context}) never occurs, PMI undefined")
        return float(v)

    def pmi_values(self) -> np.ndarray:
        """PMI for every stored pair, aligned with self.keys."""
        if not hasattr(self, "_pmi"):
            j, k = self.keys // self.stride, self.keys % self.stride
            # log( (n_jk/D) / ((n_j/D)(n_k/D)) ) = log(n_jk * D / (n_j * n_k))
            self._pmi = (np.log(self.pair_counts) + np.log(float(self.total))
                         - np.log(self.target_counts[j]) - np.log(self.context_counts[k]))
        return self._pmi


def pmi_from_pairs(targets, contexts, num_items: int) -> PmiTable:
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    contexts = np.asarray(contexts, dtype=np.int64).reshape(-1)
    if targets.size == 0:
        raise ValueError("no (context, target) pairs, PMI is undefined")
    stride = num_items + 1
    keys, counts = np.unique(targets * stride + contexts, return_counts=True)
    return PmiTable(keys, counts.astype(np.int64),
                    np.bincount(targets, minlength=stride).astype(np.int64),
                    np.bincount(contexts, minlength=stride).astype(np.int64),
                    int(targets.size), stride)


def instance_pairs(instances: Instances) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(row, slot, target, context) for every unmasked context slot."""
    rows, slots = np.nonzero(instances.masks)
    return rows, slots, instances.targets[rows], instances.contexts[rows, slots]


def compute_pmi(instances: Instances, num_items: int | None = None) -> PmiTable:
    """PMI table over the training instances (rows tagged "train" when splits are present)."""
    train = instances.split("train") if (instances.splits == SPLIT_CODES["train"]).any() else instances
    _, _, t, c = instance_pairs(train)
    return pmi_from_pairs(t, c, instances.pad if num_items is None else num_items)


# --------------------------------------------------------------------------
# correlation
# --------------------------------------------------------------------------

def pearson(x, y) -> tuple[float, bool]:
    """Pearson r and a flag that is True when either side has zero variance (r reported as 0)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("pearson needs equally long inputs")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((dx * dx).sum()), np.sqrt((dy * dy).sum())
    if sx == 0.0 or sy == 0.0:
        return 0.0, True
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0)), False


@dataclasses.dataclass
class Correlation:
    hop: int
    pearson_r: float
    n_pairs: int
    zero_variance: bool = False


def attention_weights(model, instances: Instances, chunk_rows: int = 20000) -> np.ndarray:
    """Attention of every instance, shape (n, hops, slots)."""
    out = np.zeros((len(instances), model.hops, instances.context_len))
    for lo in range(0, len(instances), chunk_rows):
        sl = slice(lo, lo + chunk_rows)
        out[sl] = model.attention(instances.users[sl], instances.targets[sl],
                                  instances.contexts[sl], instances.masks[sl])
    return out


def attention_pmi_correlation(model, instances: Instances, pmi: PmiTable, hop: int, *,
                              scatter_path=None, attention: np.ndarray | None = None) -> Correlation:
    """Pearson r between pmi(j, k) and the hop-`hop` attention on k when scoring j (hops count from 1).

    Every unmasked slot of every training instance contributes one point.
    """
    if not 1 <= hop <= model.hops:
        raise ValueError(f"hop must lie in 1..{model.hops}, got {hop}")
    train = instances.split("train") if (instances.splits == SPLIT_CODES["train"]).any() else instances
    train = train.subset(np.flatnonzero(train.usable))
    if attention is None:
        attention = attention_weights(model, train)
    rows, slots, t, c = instance_pairs(train)
    p = pmi.lookup(t, c)
    ok = ~np.isnan(p)
    a = attention[rows, hop - 1, slots][ok]
    p = p[ok]
    if p.size < 2:
        raise ValueError("fewer than 2 pairs with defined PMI")
    r, flat = pearson(p, a)
    if scatter_path is not None:
        write_scatter(scatter_path, t[ok], c[ok], p, a)
    return Correlation(hop, r, int(p.size), flat)


def write_scatter(path, targets, contexts, pmi_values, weights) -> Path:
    path = Path(path)
    table = np.column_stack([targets, contexts, pmi_values, weights])
    np.savetxt(path, table, fmt=["%d", "%d", "%.10g", "%.10g"], delimiter=",",
               header="target,context,pmi,attention", comments="")
    return path


def write_correlation_summary(path, results: list[Correlation]) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        fh.write("hop\tpearson_r\tn_pairs\tzero_variance\n")
        for res in results:
            fh.write(f"{res.hop}\t{res.pearson_r:.6f}\t{res.n_pairs}\t{int(res.zero_variance)}\n")
    return path


# --------------------------------------------------------------------------
# attention export
# --------------------------------------------------------------------------

ATTENTION_HEADER = ["user", "target", "hop", "slot", "item", "weight"]


def export_attention(model, instances: Instances, path, chunk_rows: int = 20000) -> int:
    """CSV of attention weights on unmasked slots, one row per (instance, hop, slot)."""
    path = Path(path)
    usable = instances.subset(np.flatnonzero(instances.usable))
    n = 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ATTENTION_HEADER)
        for lo in range(0, len(usable), chunk_rows):
            part = usable.subset(np.arange(lo, min(lo + chunk_rows, len(usable))))
            att = attention_weights(model, part)
            rows, slots = np.nonzero(part.masks)
            for h in range(model.hops):
                block = zip(part.users[rows].tolist(), part.targets[rows].tolist(), [h + 1] * len(rows),
                            slots.tolist(), part.contexts[rows, slots].tolist(),
                            (repr(x) for x in att[rows, h, slots].tolist()))
                w.writerows(block)
                n += len(rows)
    return n


def read_attention(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{**row, "weight": float(row["weight"])} for row in csv.DictReader(fh)]
