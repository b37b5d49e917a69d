"""Append-only lifelong interaction history: every observation, reward and
action of every trial, kept for replay. Nothing is ever discarded.

Sensor data is immutable once appended. The per-step intrinsic-reward
annotation lives in a separate layer so crediting a finished trial does not
touch stored records, and external returns stay uncontaminated.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, SequencingError


@dataclass(frozen=True)
class StepRecord:
    t: int  # global time index, 1-based
    in_vec: np.ndarray
    r_vec: np.ndarray
    out_vec: np.ndarray
    intrinsic: float = 0.0

    @property
    def sense(self) -> np.ndarray:
        return np.concatenate([self.in_vec, self.r_vec])

    @property
    def all_vec(self) -> np.ndarray:
        return np.concatenate([self.in_vec, self.r_vec, self.out_vec])

    @property
    def total_reward(self) -> float:
        return float(self.r_vec.sum())


@dataclass(frozen=True)
class TrialSpan:
    trial_id: int
    t_a: int
    t_b: int
    task_tag: str
    external_return: float

    def __len__(self) -> int:
        return self.t_b - self.t_a + 1


class HistoryStore:
    """Single-writer store of StepRecords partitioned into trials."""

    def __init__(self, m: int, n: int, o: int, seed: int = 0):
        if min(m, n, o) < 1:
            raise DimensionMismatch("m, n, o must all be >= 1")
        self.m, self.n, self.o = m, n, o
        self.seed = seed
        self._in = []
        self._r = []
        self._out = []
        self._intrinsic = []
        self._trials: list[TrialSpan] = []
        self._open_start: int | None = None
        self._open_tag = ""

    def __len__(self) -> int:
        return len(self._in)

    @property
    def trials(self) -> tuple[TrialSpan, ...]:
        return tuple(self._trials)

    @property
    def n_trials(self) -> int:
        return len(self._trials)

    def append(self, record: StepRecord) -> None:
        if record.t != len(self) + 1:
            raise SequencingError(f"expected t={len(self) + 1}, got t={record.t}")
        if len(record.in_vec) != self.m or len(record.r_vec) != self.n or len(record.out_vec) != self.o:
            raise DimensionMismatch(
                f"record dims ({len(record.in_vec)},{len(record.r_vec)},{len(record.out_vec)}) "
                f"!= store dims ({self.m},{self.n},{self.o})"
            )
        self._in.append(np.asarray(record.in_vec, dtype=np.float64).copy())
        self._r.append(np.asarray(record.r_vec, dtype=np.float64).copy())
        self._out.append(np.asarray(record.out_vec, dtype=np.float64).copy())
        self._intrinsic.append(float(record.intrinsic))

    def record(self, t: int) -> StepRecord:
        if not (1 <= t <= len(self)):
            raise IndexError(f"t={t} outside stored range 1..{len(self)}")
        i = t - 1
        return StepRecord(t, self._in[i], self._r[i], self._out[i], self._intrinsic[i])

    # -- trial bookkeeping ----------------------------------------------------

    def begin_trial(self, task_tag: str = "") -> None:
        if self._open_start is not None:
            raise SequencingError("previous trial still open")
        self._open_start = len(self) + 1
        self._open_tag = task_tag

    def end_trial(self) -> TrialSpan:
        if self._open_start is None:
            raise SequencingError("no open trial")
        t_a, t_b = self._open_start, len(self)
        if t_b < t_a:
            raise SequencingError("cannot close an empty trial")
        ext = float(sum(self._r[i].sum() for i in range(t_a - 1, t_b)))
        span = TrialSpan(len(self._trials) + 1, t_a, t_b, self._open_tag, ext)
        self._trials.append(span)
        self._open_start = None
        return span

    # -- reward sums ----------------------------------------------------------

    def total_reward(self, t: int) -> float:
        if not (1 <= t <= len(self)):
            raise IndexError(f"t={t} outside stored range")
        return float(self._r[t - 1].sum())

    def cumulative_reward(self, t: int) -> float:
        if not (1 <= t <= len(self)):
            raise IndexError(f"t={t} outside stored range")
        return float(sum(self._r[i].sum() for i in range(t)))

    # -- replay ---------------------------------------------------------------

    def sample_trials(self, k: int, rule: str, rng: np.random.Generator) -> list[TrialSpan]:
        """min(k, #trials) distinct completed trials; under
        always_include_latest the most recent trial is always included."""
        if not self._trials:
            raise SequencingError("no completed trials to sample")
        if rule not in ("uniform_random", "always_include_latest"):
            raise ValueError(f"unknown sampling rule {rule!r}")
        n = len(self._trials)
        k = min(k, n)
        if rule == "always_include_latest":
            picked = [n - 1]
            rest = rng.permutation(n - 1)[: k - 1] if k > 1 else []
            picked += [int(i) for i in rest]
        else:
            picked = [int(i) for i in rng.permutation(n)[:k]]
        return [self._trials[i] for i in sorted(picked)]

    def replay(self, span: TrialSpan) -> list[StepRecord]:
        if not (1 <= span.trial_id <= len(self._trials)) or self._trials[span.trial_id - 1] != span:
            raise KeyError(f"unknown trial {span.trial_id}")
        return [self.record(t) for t in range(span.t_a, span.t_b + 1)]

    def latest_trial(self) -> TrialSpan:
        if not self._trials:
            raise SequencingError("no completed trials")
        return self._trials[-1]

    # -- curiosity annotation ---------------------------------------------------

    def credit_intrinsic(self, trial_id: int, amount: float) -> None:
        """Attach an intrinsic-reward credit to the trial's final step."""
        if not (1 <= trial_id <= len(self._trials)):
            raise KeyError(f"unknown trial {trial_id}")
        span = self._trials[trial_id - 1]
        self._intrinsic[span.t_b - 1] += float(amount)

    def intrinsic_return(self, span: TrialSpan) -> float:
        return float(sum(self._intrinsic[span.t_a - 1 : span.t_b]))

    # -- persistence ------------------------------------------------------------

    def save_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"history,v1,m={self.m},n={self.n},o={self.o},seed={self.seed}\n")
        for sp in self._trials:
            buf.write(f"trial,{sp.trial_id},{sp.t_a},{sp.t_b},{sp.task_tag},{sp.external_return:.17g}\n")
        for t in range(1, len(self) + 1):
            i = t - 1
            fields = (
                [str(t)]
                + [f"{v:.17g}" for v in self._in[i]]
                + [f"{v:.17g}" for v in self._r[i]]
                + [f"{v:.17g}" for v in self._out[i]]
                + [f"{self._intrinsic[i]:.17g}"]
            )
            buf.write("step," + ",".join(fields) + "\n")
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.save_text())

    @classmethod
    def load_text(cls, text: str) -> "HistoryStore":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split(",")
        if head[:2] != ["history", "v1"]:
            raise SequencingError(f"bad history header: {lines[0]!r}")
        kv = dict(part.split("=") for part in head[2:])
        store = cls(int(kv["m"]), int(kv["n"]), int(kv["o"]), int(kv["seed"]))
        spans = []
        for ln in lines[1:]:
            f = ln.split(",")
            if f[0] == "trial":
                spans.append(TrialSpan(int(f[1]), int(f[2]), int(f[3]), f[4], float(f[5])))
            elif f[0] == "step":
                t = int(f[1])
                vals = [float(v) for v in f[2:]]
                m, n, o = store.m, store.n, store.o
                rec = StepRecord(
                    t,
                    np.array(vals[:m]),
                    np.array(vals[m : m + n]),
                    np.array(vals[m + n : m + n + o]),
                    vals[m + n + o],
                )
                store.append(rec)
            else:
                raise SequencingError(f"unknown history line: {ln!r}")
        store._trials = spans
        return store

    @classmethod
    def load(cls, path) -> "HistoryStore":
        with open(path) as f:
            return cls.load_text(f.read())

    def export_trial_returns(self) -> str:
        """Per-trial (trial_id, external_return, intrinsic_return) CSV rows."""
        rows = ["trial_id,external_return,intrinsic_return"]
        for sp in self._trials:
            rows.append(f"{sp.trial_id},{sp.external_return:.17g},{self.intrinsic_return(sp):.17g}")
        return "\n".join(rows) + "\n"
