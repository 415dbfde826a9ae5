import sys, os
sys.path.insert(0, os.path.dirname(__file__))

import numpy as np

from msbo.inventory import CascadeSchema, Inventory


def build_inventory(schema: CascadeSchema, stage_fns, n_full, rng, n_partial=(), design=None):
    """Inventory filled by running plain functions ``m_i = f_i(x_i, m_{i-1})``.

    ``n_partial`` lists, per stage count k, how many extra samples stop after k stages.
    """
    inv = Inventory(schema)
    plan = [schema.n_stages] * n_full + [k for k, count in enumerate(n_partial, start=1) for _ in range(count)]
    for j, depth in enumerate(plan):
        x = design[j] if design is not None else rng.random(schema.total_x_dim)
        parts = schema.split_joint(x)
        sid = inv.create_sample(parts[0])
        m = None
        for i in range(depth):
            m = np.atleast_1d(np.asarray(stage_fns[i](parts[i], m), dtype=float))
            inv.record_measurement(sid, i + 1, parts[i], m)
    return inv


class FunctionEnvironment:
    """Deterministic environment built from plain stage functions ``m_i = f_i(x_i, m_{i-1})``."""

    def __init__(self, schema: CascadeSchema, stage_fns, reference=None):
        self.schema = schema
        self.stage_fns = stage_fns
        self.reference = reference
        self._state = {}
        self.calls = []

    def run_stage(self, sample_id, stage, params):
        done, m = self._state.get(sample_id, (0, None))
        assert stage == done + 1, "stage executed out of order"
        self.calls.append((sample_id, stage))
        m = np.atleast_1d(np.asarray(self.stage_fns[stage - 1](np.asarray(params), m), dtype=float))
        self._state[sample_id] = (stage, m)
        return m

    def true_objective(self, x_joint):
        m = None
        for fn, part in zip(self.stage_fns, self.schema.split_joint(x_joint)):
            m = np.atleast_1d(np.asarray(fn(part, m), dtype=float))
        return float(m[0])

    def regret_reference(self):
        return self.reference
