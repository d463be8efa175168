"""
Database models for the benchmark result store.

Benchmark rows are plain SQLAlchemy declarative entities: the suite creates
them in memory, the CSV writer reads their columns, and they can be persisted
to any SQLAlchemy engine for later comparison across machines or versions.
"""

from typing import Optional

from sqlalchemy import Boolean, Float, Integer, String
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column


class Base(DeclarativeBase):
    """Declarative base of the result store."""
    pass


CSV_COLUMNS = ('method', 'nx', 'ny', 'density', 'seed', 'aggregate', 'status', 'wall_time',
               'iterations', 'rmse_truth', 'rmse_oracle', 'threads')


class BenchResult(Base):
    """
    One benchmark cell: a method run on one synthetic problem, or the mean of
    such runs over the seeds of a cell.

    Attributes:
        method (Mapped[str]): Method name (``mp``, ``mp-multigrid``, ``3dvar`` or ``exact``).
        nx, ny (Mapped[int]): Grid dimensions.
        density (Mapped[float]): Observed fraction of nodes.
        seed (Mapped[Optional[int]]): Problem seed; ``None`` on aggregate rows.
        aggregate (Mapped[bool]): Whether the row is a mean over seeds.
        status (Mapped[str]): Solver status; ``diverged`` when any seed diverged on aggregate rows.
        wall_time (Mapped[float]): Seconds spent in the solver call.
        iterations (Mapped[float]): Sweeps or L-BFGS iterations (summed over multigrid levels).
        rmse_truth (Mapped[Optional[float]]): RMSE against the sampled truth.
        rmse_oracle (Mapped[Optional[float]]): RMSE against the dense posterior mean, when feasible.
        threads (Mapped[int]): Worker threads available to the solver.
    """

    __tablename__ = 'bench_results'

    id: Mapped[int] = mapped_column(Integer, primary_key=True)
    method: Mapped[str] = mapped_column(String(32))
    nx: Mapped[int] = mapped_column(Integer)
    ny: Mapped[int] = mapped_column(Integer)
    density: Mapped[float] = mapped_column(Float)
    seed: Mapped[Optional[int]] = mapped_column(Integer, nullable=True)
    aggregate: Mapped[bool] = mapped_column(Boolean, default=False)
    status: Mapped[str] = mapped_column(String(32))
    wall_time: Mapped[float] = mapped_column(Float)
    iterations: Mapped[float] = mapped_column(Float)
    rmse_truth: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    rmse_oracle: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    threads: Mapped[int] = mapped_column(Integer, default=1)

    @property
    def n(self) -> int:
        return self.nx * self.ny

    def as_row(self) -> list:
        """Column values in ``CSV_COLUMNS`` order, ``None`` rendered as an empty cell."""
        return ['' if getattr(self, name) is None else getattr(self, name) for name in CSV_COLUMNS]

    def __repr__(self):
        seed = 'mean' if self.aggregate else self.seed
        return f"BenchResult({self.method}, {self.nx}x{self.ny}, density={self.density}, seed={seed})"
