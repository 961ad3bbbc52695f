"""Ordered process-pool map.

Results are always assembled in input order, so reductions done by the
caller are independent of the worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def ordered_map(fn, items, workers=1):
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


class EvalCounted:
    """Picklable task wrapper returning ``(result, field evaluations)``."""

    def __init__(self, fn, field, **kw):
        self.fn, self.field, self.kw = fn, field, kw

    def __call__(self, item):
        before = self.field.n_evals
        out = self.fn(self.field, item, **self.kw)
        return out, self.field.n_evals - before


def counted_map(fn, field, items, workers=1, **kw):
    """Map ``fn(field, item, **kw)`` over items and add the field
    evaluations done (possibly in worker processes) to ``field.n_evals``."""
    res = ordered_map(EvalCounted(fn, field, **kw), items, workers)
    if workers is not None and workers > 1 and len(res) > 1:
        field.n_evals += sum(n for _, n in res)
    return [r for r, _ in res]
