"""Skeleton graphs and the flexible propagation operator.

The propagation operator blends one-hop and two-hop neighbourhoods of the
symmetrically normalized adjacency: P = ((1-s)I + sA_hat)A_hat, evaluated
right-to-left against node features so the squared matrix is never formed.
A learnable modulation term Q can be added to the normalized adjacency to
let the model pick up connections beyond the skeletal bones.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

from .numerics import DomainError, Matrix, ShapeError, lincomb, matmul
from .numerics import add as nm_add
from .numerics import symmetrize as nm_symmetrize


class DegenerateGraphError(ValueError):
    """The graph cannot support degree normalization (isolated node, ...)."""


# 17-joint human skeleton: pelvis-rooted tree with spine/head chain,
# two leg chains and two arm chains hanging off the thorax.
H36M_JOINT_NAMES = (
    "pelvis",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
)

H36M_EDGES = (
    (0, 1), (1, 2), (2, 3),
    (0, 4), (4, 5), (5, 6),
    (0, 7), (7, 8), (8, 9), (9, 10),
    (8, 11), (11, 12), (12, 13),
    (8, 14), (14, 15), (15, 16),
)


class SkeletonGraph:
    """Undirected joint graph: joint count, edge list, root joint, names."""

    def __init__(
        self,
        n_joints: int,
        edges: Iterable[Sequence[int]],
        root: int = 0,
        joint_names: Sequence[str] | None = None,
        require_connected: bool = True,
    ) -> None:
        if n_joints < 1:
            raise DomainError("skeleton needs at least one joint")
        if not (0 <= root < n_joints):
            raise DomainError(f"root {root} out of range for {n_joints} joints")
        seen: set[tuple[int, int]] = set()
        normalized: list[tuple[int, int]] = []
        for edge in edges:
            i, j = int(edge[0]), int(edge[1])
            if i == j:
                raise DomainError(f"self-edge ({i},{j}) not allowed")
            if not (0 <= i < n_joints and 0 <= j < n_joints):
                raise DomainError(f"edge ({i},{j}) references a missing joint")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise DomainError(f"duplicate edge ({i},{j})")
            seen.add(key)
            normalized.append(key)
        if joint_names is not None and len(joint_names) != n_joints:
            raise DomainError("joint_names length must equal n_joints")

        self.n_joints = n_joints
        self.edges = tuple(normalized)
        self.root = root
        self.joint_names = tuple(joint_names) if joint_names else tuple(
            f"joint_{i}" for i in range(n_joints)
        )
        if require_connected and not self.is_connected():
            raise DomainError("skeleton graph must be connected")

    # -- structure ----------------------------------------------------------
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_joints, self.n_joints))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        return self.adjacency().sum(axis=1)

    def neighbors(self, joint: int) -> list[int]:
        out = []
        for i, j in self.edges:
            if i == joint:
                out.append(j)
            elif j == joint:
                out.append(i)
        return sorted(out)

    def is_connected(self) -> bool:
        if self.n_joints == 1:
            return True
        seen = {self.root}
        frontier = [self.root]
        while frontier:
            nxt = []
            for node in frontier:
                for nb in self.neighbors(node):
                    if nb not in seen:
                        seen.add(nb)
                        nxt.append(nb)
            frontier = nxt
        return len(seen) == self.n_joints

    def is_tree(self) -> bool:
        return self.is_connected() and len(self.edges) == self.n_joints - 1

    def parents(self) -> list[int]:
        """Parent of each joint in the BFS tree from the root (-1 for root).

        Only defined for tree-shaped skeletons.
        """
        if not self.is_tree():
            raise DomainError("parents() requires a tree-shaped skeleton")
        parent = [-1] * self.n_joints
        order = [self.root]
        seen = {self.root}
        idx = 0
        while idx < len(order):
            node = order[idx]
            idx += 1
            for nb in self.neighbors(node):
                if nb not in seen:
                    seen.add(nb)
                    parent[nb] = node
                    order.append(nb)
        return parent

    def topological_order(self) -> list[int]:
        """Joints ordered so every joint appears after its parent."""
        parent = self.parents()
        order = [self.root]
        remaining = [j for j in range(self.n_joints) if j != self.root]
        while remaining:
            progressed = []
            for j in remaining:
                if parent[j] in order:
                    order.append(j)
                    progressed.append(j)
            remaining = [j for j in remaining if j not in progressed]
        return order

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "n_joints": self.n_joints,
            "root": self.root,
            "joint_names": list(self.joint_names),
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SkeletonGraph":
        try:
            return cls(
                n_joints=int(payload["n_joints"]),
                edges=payload["edges"],
                root=int(payload.get("root", 0)),
                joint_names=payload.get("joint_names"),
            )
        except KeyError as missing:
            raise DomainError(f"skeleton JSON missing key {missing}") from None

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "SkeletonGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


def h36m_skeleton() -> SkeletonGraph:
    """Default 17-joint human skeleton (pelvis root, 16-edge tree)."""
    return SkeletonGraph(17, H36M_EDGES, root=0, joint_names=H36M_JOINT_NAMES)


# --------------------------------------------------------------------------
# Adjacency normalization
# --------------------------------------------------------------------------

def normalize_adjacency_array(a: np.ndarray) -> np.ndarray:
    """D^{-1/2} A D^{-1/2} for a raw 0/1 adjacency array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got {a.shape}")
    deg = a.sum(axis=1)
    if np.any(deg == 0):
        isolated = int(np.argmin(deg))
        raise DegenerateGraphError(
            f"joint {isolated} has degree 0; cannot form D^(-1/2)"
        )
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    return a * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def normalize_adjacency(g: SkeletonGraph) -> Matrix:
    """Symmetrically normalized adjacency of the skeleton as a Matrix."""
    return Matrix(normalize_adjacency_array(g.adjacency()))


# --------------------------------------------------------------------------
# Propagation operator
# --------------------------------------------------------------------------

class PropagationOperator:
    """Blended one/two-hop propagation with optional learnable modulation.

    ``s`` weighs two-hop against one-hop aggregation. When modulation is
    enabled the effective adjacency is a_hat + Q (Q symmetrized by transpose
    averaging unless symmetrization is disabled for ablation runs).
    ``s`` values of exactly 0 or 1 are accepted so the degenerate single-hop
    and pure two-hop operators stay testable; training configs restrict the
    value to the open interval.
    """

    def __init__(
        self,
        a_hat: Matrix,
        s: float,
        q: Matrix | None = None,
        modulation_enabled: bool = True,
        symmetrize_enabled: bool = True,
    ) -> None:
        a = a_hat.to_numpy()
        if a_hat.rows != a_hat.cols:
            raise ShapeError(f"a_hat must be square, got {a_hat.shape}")
        if not np.allclose(a, a.T, atol=1e-12):
            raise DomainError("a_hat must be symmetric")
        if np.any(a < 0):
            raise DomainError("a_hat must be nonnegative")
        if np.any(np.abs(np.diag(a)) > 0):
            raise DomainError("a_hat must have a zero diagonal")
        radius = float(np.max(np.abs(np.linalg.eigvalsh(a)))) if a_hat.rows else 0.0
        if radius > 1.0 + 1e-9:
            raise DomainError(f"spectral radius of a_hat is {radius:.6f} > 1")
        if not (0.0 <= s <= 1.0):
            raise DomainError(f"s must lie in [0, 1], got {s}")
        if q is None:
            q = Matrix.zeros(a_hat.rows, a_hat.cols)
        if q.shape != a_hat.shape:
            raise ShapeError(f"q shape {q.shape} must match a_hat {a_hat.shape}")

        self.a_hat = a_hat
        self.q = q
        self.s = float(s)
        self.modulation_enabled = modulation_enabled
        self.symmetrize_enabled = symmetrize_enabled

    @classmethod
    def from_graph(
        cls,
        g: SkeletonGraph,
        s: float,
        modulation_enabled: bool = True,
        symmetrize_enabled: bool = True,
        q_init_scale: float = 0.01,
        rng: np.random.Generator | None = None,
    ) -> "PropagationOperator":
        """Build from a skeleton; Q starts as small uniform noise."""
        a_hat = normalize_adjacency(g)
        q = None
        if modulation_enabled:
            rng = rng if rng is not None else np.random.default_rng(0)
            q = Matrix(rng.uniform(-q_init_scale, q_init_scale, size=(g.n_joints, g.n_joints)))
        return cls(a_hat, s, q=q, modulation_enabled=modulation_enabled,
                   symmetrize_enabled=symmetrize_enabled)

    @property
    def n(self) -> int:
        return self.a_hat.rows

    def effective_adjacency(self) -> Matrix:
        """Adjacency actually used in products (taped, so Q gets gradients)."""
        if not self.modulation_enabled:
            return self.a_hat
        q = symmetrize_modulation(self.q) if self.symmetrize_enabled else self.q
        return nm_add(self.a_hat, q)


def symmetrize_modulation(q: Matrix) -> Matrix:
    """Transpose-average a square modulation matrix: (Q + Qᵀ)/2."""
    return nm_symmetrize(q)


def propagate(op: PropagationOperator, h: Matrix, a_eff: Matrix | None = None) -> Matrix:
    """Apply ((1-s)I + sA)A to node features h, right to left.

    Two N x N by N x F products plus one fused axpy; the squared adjacency
    is never materialized. Passing a precomputed effective adjacency lets a
    multi-layer forward share one modulation subgraph on the tape.
    """
    if a_eff is None:
        a_eff = op.effective_adjacency()
    if h.rows != a_eff.cols:
        raise ShapeError(f"propagate: features have {h.rows} rows, graph has {a_eff.cols} joints")
    one_hop = matmul(a_eff, h)
    two_hop = matmul(a_eff, one_hop)
    return lincomb(1.0 - op.s, one_hop, op.s, two_hop)


# --------------------------------------------------------------------------
# Spectral radius
# --------------------------------------------------------------------------

class SpectralRadius(NamedTuple):
    value: float
    converged: bool
    iterations: int

    def __float__(self) -> float:  # pragma: no cover - convenience
        return self.value


def spectral_radius(
    m: Matrix | np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    seed: int = 0,
) -> SpectralRadius:
    """Dominant |eigenvalue| estimate by power iteration with a random start.

    Iterates on the Gram operator MᵀM so spectra with paired +/- extremes
    (bipartite graphs) still converge; for the symmetric matrices used here
    the estimate equals the spectral radius. Stops when successive Rayleigh
    estimates differ by less than ``tol``; if the budget runs out the last
    estimate is returned with ``converged=False``.
    """
    a = m.to_numpy() if isinstance(m, Matrix) else np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"spectral_radius needs a square matrix, got {a.shape}")
    if not np.any(a):
        raise DomainError("spectral_radius: matrix is all zeros")

    n = a.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)

    estimate = 0.0
    previous: float | None = None
    for iteration in range(1, max_iter + 1):
        ax = a @ x
        estimate = float(np.linalg.norm(ax))  # sqrt of Gram Rayleigh quotient at x
        if previous is not None and abs(estimate - previous) < tol:
            return SpectralRadius(estimate, True, iteration)
        previous = estimate
        z = a.T @ ax
        nz = np.linalg.norm(z)
        if nz == 0.0:
            # x landed in the kernel; restart from a fresh direction
            x = rng.standard_normal(n)
            x /= np.linalg.norm(x)
            previous = None
            continue
        x = z / nz
    return SpectralRadius(estimate, False, max_iter)


# --------------------------------------------------------------------------
# Stability report
# --------------------------------------------------------------------------

@dataclass
class StabilityRow:
    s: float
    rho_p: float
    bound: float
    holds: bool
    rho_modulated: float | None = None


@dataclass
class StabilityReport:
    rows: list[StabilityRow]

    COLUMNS = ("s", "rho_P", "bound", "holds", "rho_modulated")

    def write_csv(self, target: str | Path | IO[str]) -> None:
        own = isinstance(target, (str, Path))
        handle = open(target, "w", newline="") if own else target
        try:
            writer = csv.writer(handle)
            writer.writerow(self.COLUMNS)
            for row in self.rows:
                writer.writerow([
                    f"{row.s:.6g}",
                    f"{row.rho_p:.12g}",
                    f"{row.bound:.12g}",
                    str(row.holds).lower(),
                    "" if row.rho_modulated is None else f"{row.rho_modulated:.12g}",
                ])
        finally:
            if own:
                handle.close()


def stability_report(
    g: SkeletonGraph,
    s_values: Sequence[float],
    q: Matrix | None = None,
    seed: int = 0,
) -> StabilityReport:
    """Per-s table of the propagation radius against its triangle bound.

    rho_P comes from the power-iteration estimator; the bound terms
    (1-s)rho(A_hat) + s rho(A_hat^2) use a dense symmetric eigensolve so the
    two columns cross-check each other. When a modulation matrix is given,
    the radius of the modulated operator (with Q transpose-averaged) is
    reported as well; it is informational and never clamped.
    """
    for s in s_values:
        if not (0.0 < s < 1.0):
            raise DomainError(f"s values must lie in (0, 1), got {s}")
    a = normalize_adjacency(g).to_numpy()
    rho_a = float(np.max(np.abs(np.linalg.eigvalsh(a))))
    rho_a2 = float(np.max(np.abs(np.linalg.eigvalsh(a @ a))))

    a_mod = None
    if q is not None:
        if q.rows != g.n_joints or q.cols != g.n_joints:
            raise ShapeError(f"q shape {q.shape} does not match {g.n_joints} joints")
        qs = q.to_numpy()
        a_mod = a + (qs + qs.T) * 0.5

    rows = []
    for s in s_values:
        p = (1.0 - s) * a + s * (a @ a)
        rho_p = spectral_radius(p, seed=seed).value
        bound = (1.0 - s) * rho_a + s * rho_a2
        row = StabilityRow(s=float(s), rho_p=rho_p, bound=bound,
                           holds=rho_p <= bound + 1e-9)
        if a_mod is not None:
            pm = (1.0 - s) * a_mod + s * (a_mod @ a_mod)
            row.rho_modulated = spectral_radius(pm, seed=seed).value
        rows.append(row)
    return StabilityReport(rows)
