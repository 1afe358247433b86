"""Self-consistent rescaling configurations and the independent convex oracle.

A balancing run multiplies each unit i by some cumulative factor Lambda_i
(visible units stay at 1), so every edge weight gets rescaled by
Lambda_dst / Lambda_src**c_src.  Working with per-edge logs
L = log(Lambda_dst) - c_src * log(Lambda_src) turns the reachable set into a
linear manifold, characterized by weighted zero-sum constraints along
input-to-output paths and directed cycles, and turns the total weight cost
into a strictly convex sum of exponentials.  Minimizing that sum over the
manifold certifies the unique balanced state any fair schedule converges to.

The solver itself is parametrized directly by the per-unit log multipliers of
the hidden homogeneous units (everything else pinned at 0), which sweeps out
exactly the constrained manifold with no constraints left to impose; the
explicit path/cycle constraints remain available for verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .activations import homogeneity_exponent
from .netgraph import BIAS, HIDDEN, INPUT, OUTPUT, Edge, Network
from .regularizer import CostSpec


class UnidentifiableUnitError(ValueError):
    """Hidden units whose multipliers are not pinned down by any nonzero path."""


class ConvexSolverError(RuntimeError):
    """Newton failed to reach the gradient tolerance."""


@dataclass(frozen=True)
class Constraint:
    """A zero-sum constraint: kind "path" (input..output) or "cycle" (closed)."""

    kind: str
    units: tuple


@dataclass
class MultiplierAssignment:
    """Per-unit positive multipliers; visible and non-homogeneous units sit at 1."""

    lambda_per_unit: dict


@dataclass
class SelfConsistentConfig:
    """Per-edge log rescaling factors, keyed by (src, dst)."""

    l_per_edge: dict


@dataclass
class ManifoldProblem:
    """Data of the convex program: edge cost coefficients, exponents, constraints."""

    p: float
    beta: float
    edge_coeffs: dict
    exponents: dict
    pinned: frozenset
    constraints: tuple


@dataclass
class ConvexSolution:
    config: SelfConsistentConfig
    multipliers: MultiplierAssignment
    r_star: float
    grad_norm: float
    iterations: int
    constraint_residuals: list


def _exponent_or_one(net, u):
    c = homogeneity_exponent(net.unit(u).activation)
    return 1.0 if c is None else float(c)


def _nonzero_adj(net):
    fwd = {u.id: [] for u in net.units}
    bwd = {u.id: [] for u in net.units}
    for e in net.edges:
        if e.weight != 0.0:
            fwd[e.src].append(e.dst)
            bwd[e.dst].append(e.src)
    for a in (fwd, bwd):
        for u in a:
            a[u] = sorted(set(a[u]))
    return fwd, bwd


def _bfs_path(adj, start, goal_test):
    """Shortest path from start to any goal unit, exploring ids in order."""
    if goal_test(start):
        return [start]
    parent = {start: None}
    frontier = [start]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v in parent:
                    continue
                parent[v] = u
                if goal_test(v):
                    path = [v]
                    while parent[path[-1]] is not None:
                        path.append(parent[path[-1]])
                    path.reverse()
                    return path
                nxt.append(v)
        frontier = nxt
    return None


def enumerate_constraints(net: Network):
    """Representative constraint set covering every hidden unit.

    One input-to-output path (over nonzero edges) through each hidden unit;
    for recurrent networks additionally one directed cycle per independent
    cycle of each strongly connected component.
    """
    fwd, bwd = _nonzero_adj(net)
    roles = {u.id: u.role for u in net.units}
    paths = []
    seen = set()
    for h in sorted(net.hidden_ids):
        back = _bfs_path(bwd, h, lambda u: roles[u] in (INPUT, BIAS))
        fore = _bfs_path(fwd, h, lambda u: roles[u] == OUTPUT)
        if back is None or fore is None:
            raise ValueError(f"hidden unit {h} lies on no input->output path of nonzero edges")
        path = tuple(reversed(back)) + tuple(fore[1:])
        if path not in seen:
            seen.add(path)
            paths.append(Constraint("path", path))

    cycles = []
    if net.recurrent:
        for scc in _strongly_connected(fwd):
            inside = set(scc)
            sub = {u: [v for v in fwd[u] if v in inside] for u in scc}
            has_self = any(u in fwd[u] for u in scc)
            if len(scc) == 1 and not has_self:
                continue
            root = min(scc)
            tree_edges = set()
            parent = {root: None}
            frontier = [root]
            while frontier:
                nxt = []
                for u in frontier:
                    for v in sub[u]:
                        if v not in parent and v != u:
                            parent[v] = u
                            tree_edges.add((u, v))
                            nxt.append(v)
                frontier = nxt
            for u in sorted(scc):
                for v in sub[u]:
                    if (u, v) in tree_edges:
                        continue
                    if u == v:
                        cycles.append(Constraint("cycle", (u, u)))
                        continue
                    back = _bfs_path(sub, v, lambda x: x == u)
                    cycles.append(Constraint("cycle", (u,) + tuple(back)))
    return paths + cycles


def _path_coefficients(net, units):
    """Weight of each edge's L in the path's zero-sum constraint.

    Propagating log Lambda along the path multiplies earlier contributions by
    the exponents of the interior units they pass through, so edge k carries
    the product of exponents of units k..n-1.
    """
    n = len(units) - 1
    coeffs = []
    for k in range(1, n + 1):
        acc = 1.0
        for m in range(k, n):
            acc *= _exponent_or_one(net, units[m])
        coeffs.append(acc)
    return coeffs


def constraint_residual(net, constraint: Constraint, config: SelfConsistentConfig) -> float:
    """Signed violation of one constraint by a per-edge log configuration."""
    units = constraint.units
    L = config.l_per_edge
    if constraint.kind == "path":
        coeffs = _path_coefficients(net, units)
        total = 0.0
        for k in range(1, len(units)):
            total += coeffs[k - 1] * L[(units[k - 1], units[k])]
        return total
    # cycle: propagate around once and compare with the starting value 0
    l = 0.0
    for k in range(1, len(units)):
        src, dst = units[k - 1], units[k]
        l = L[(src, dst)] + _exponent_or_one(net, src) * l
    return l


def is_self_consistent(config: SelfConsistentConfig, net: Network, tol: float = 1e-9):
    """Check whether per-edge logs come from per-unit multipliers.

    Propagates log multipliers along the representative constraints (visible
    and non-homogeneous units pinned at 0) and then re-checks every nonzero
    edge.  Returns (True, MultiplierAssignment) or (False, description of the
    first conflicting unit).
    """
    L = config.l_per_edge
    for e in net.edges:
        if e.weight != 0.0 and (e.src, e.dst) not in L:
            raise ValueError(f"config missing an entry for nonzero edge ({e.src}->{e.dst})")

    pinned = {
        u.id
        for u in net.units
        if u.role != HIDDEN or homogeneity_exponent(u.activation) is None
    }
    loglam = {u: 0.0 for u in pinned}
    constraints = enumerate_constraints(net)
    for con in constraints:
        units = con.units
        if units[0] not in loglam:
            continue  # cycles are re-walked once path propagation anchors them
        l = loglam[units[0]]
        for k in range(1, len(units)):
            src, dst = units[k - 1], units[k]
            l = L[(src, dst)] + _exponent_or_one(net, src) * l
            if dst in loglam:
                if abs(l - loglam[dst]) > tol:
                    return False, (
                        f"unit {dst}: propagated log multiplier {l!r} conflicts with "
                        f"{loglam[dst]!r}"
                    )
            else:
                loglam[dst] = l
    for e in net.edges:
        if e.weight == 0.0:
            continue
        if e.src not in loglam or e.dst not in loglam:
            return False, f"unit {e.dst if e.dst not in loglam else e.src}: multiplier not determined"
        want = loglam[e.dst] - _exponent_or_one(net, e.src) * loglam[e.src]
        if abs(L[(e.src, e.dst)] - want) > tol:
            return False, (
                f"unit {e.dst}: edge ({e.src}->{e.dst}) log factor {L[(e.src, e.dst)]!r} "
                f"does not match the recovered multipliers ({want!r})"
            )
    lam = {u.id: math.exp(loglam[u.id]) if u.id in loglam else 1.0 for u in net.units}
    return True, MultiplierAssignment(lam)


def project_balancing_run(final_net: Network, initial_net: Network) -> SelfConsistentConfig:
    """Per-edge log weight ratios of a balancing run's end state vs its start."""
    if [(e.src, e.dst) for e in final_net.edges] != [(e.src, e.dst) for e in initial_net.edges]:
        raise ValueError("networks do not share the same edge list")
    L = {}
    for e0, e1 in zip(initial_net.edges, final_net.edges):
        if e0.weight == 0.0:
            if e1.weight != 0.0:
                raise ValueError(
                    f"edge ({e0.src}->{e0.dst}) went from zero to nonzero; not a rescaling"
                )
            continue
        ratio = e1.weight / e0.weight
        if ratio <= 0.0:
            raise ValueError(
                f"edge ({e0.src}->{e0.dst}) flipped sign or vanished; not a rescaling"
            )
        L[(e0.src, e0.dst)] = math.log(ratio)
    return SelfConsistentConfig(L)


def build_manifold_problem(net: Network, cost: CostSpec) -> ManifoldProblem:
    single = cost.single_term
    if single is None:
        raise ValueError("the convex program is defined for a single power term")
    p, beta = single
    constraints = enumerate_constraints(net)
    covered = set()
    for con in constraints:
        covered.update(con.units)
    for h in net.hidden_ids:
        if h not in covered:
            raise ValueError(f"hidden unit {h} appears in no constraint")
    coeffs = {
        (e.src, e.dst): beta * abs(e.weight) ** p for e in net.edges if e.weight != 0.0
    }
    pinned = frozenset(
        u.id
        for u in net.units
        if u.role != HIDDEN or homogeneity_exponent(u.activation) is None
    )
    exponents = {u.id: _exponent_or_one(net, u.id) for u in net.units}
    return ManifoldProblem(p, beta, coeffs, exponents, pinned, tuple(constraints))


def solve_convex(
    net: Network,
    cost: CostSpec,
    grad_tol: float = 1e-10,
    max_iter: int = 200,
) -> ConvexSolution:
    """Minimize the total weight cost over the rescaling manifold.

    Variables are the log multipliers of the hidden homogeneous units; each
    nonzero edge contributes coeff * exp(p * (l_dst - c_src * l_src)).  The
    objective is smooth and strictly convex, so a damped Newton iteration
    converges in a handful of steps; it stops when the gradient sup-norm of
    the objective normalized by its initial value falls below ``grad_tol``
    (an absolute tolerance would sit under the floating-point floor for
    large-cost problems).
    """
    free = sorted(
        u.id
        for u in net.units
        if u.role == HIDDEN and homogeneity_exponent(u.activation) is not None
    )
    col = {u: k for k, u in enumerate(free)}
    nfree = len(free)

    # identifiability: every free unit must reach a pinned unit through
    # nonzero edges (ignoring direction), otherwise its multiplier is free to
    # drift and the program has no minimum.
    pinned_units = {
        u.id
        for u in net.units
        if u.role != HIDDEN or homogeneity_exponent(u.activation) is None
    }
    neigh = {u.id: set() for u in net.units}
    for e in net.edges:
        if e.weight != 0.0:
            neigh[e.src].add(e.dst)
            neigh[e.dst].add(e.src)
    anchored = set(pinned_units)
    frontier = list(anchored)
    while frontier:
        u = frontier.pop()
        for v in neigh[u]:
            if v not in anchored:
                anchored.add(v)
                frontier.append(v)
    lost = [u for u in free if u not in anchored]
    if lost:
        raise UnidentifiableUnitError(
            f"units {lost} are not connected to any visible unit by nonzero edges"
        )

    problem = build_manifold_problem(net, cost)
    p = problem.p

    edges = sorted(problem.edge_coeffs)
    coeff = np.array([problem.edge_coeffs[e] for e in edges])
    scale = float(np.sum(coeff)) if len(coeff) else 1.0
    if scale > 0.0:
        coeff = coeff / scale
    else:
        scale = 1.0
    src = np.array([e[0] for e in edges], dtype=np.int64)
    dst = np.array([e[1] for e in edges], dtype=np.int64)
    csrc = np.array([problem.exponents[e[0]] for e in edges])
    dst_col = np.array([col.get(int(d), -1) for d in dst], dtype=np.int64)
    src_col = np.array([col.get(int(s), -1) for s in src], dtype=np.int64)

    def z_of(l):
        ld = np.where(dst_col >= 0, l[np.maximum(dst_col, 0)], 0.0)
        ls = np.where(src_col >= 0, l[np.maximum(src_col, 0)], 0.0)
        return ld - csrc * ls

    def objective(l):
        with np.errstate(over="ignore"):
            return float(np.sum(coeff * np.exp(p * z_of(l))))

    l = np.zeros(nfree)
    if nfree == 0:
        r = objective(l) * scale
        config = SelfConsistentConfig({e: 0.0 for e in edges})
        lam = {u.id: 1.0 for u in net.units}
        residuals = [constraint_residual(net, c, config) for c in problem.constraints]
        return ConvexSolution(config, MultiplierAssignment(lam), r, 0.0, 0, residuals)

    grad_norm = math.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        t = coeff * np.exp(p * z_of(l))
        g = np.zeros(nfree)
        np.add.at(g, dst_col[dst_col >= 0], p * t[dst_col >= 0])
        sel = src_col >= 0
        np.add.at(g, src_col[sel], -p * csrc[sel] * t[sel])
        grad_norm = float(np.max(np.abs(g)))
        if grad_norm <= grad_tol:
            break
        H = np.zeros((nfree, nfree))
        for k in range(len(edges)):
            tk = p * p * t[k]
            a = dst_col[k]
            b = src_col[k]
            if a >= 0:
                H[a, a] += tk
            if b >= 0:
                H[b, b] += tk * csrc[k] * csrc[k]
            if a >= 0 and b >= 0:
                H[a, b] -= tk * csrc[k]
                H[b, a] -= tk * csrc[k]
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(H + 1e-12 * np.trace(H) * np.eye(nfree), -g)
        r0 = float(np.sum(t))
        slope = float(g @ step)
        s = 1.0
        accepted = False
        for _ in range(80):
            trial = l + s * step
            if np.array_equal(trial, l):
                break  # damping stopped moving the iterate; fall through
            if objective(trial) <= r0 + 1e-4 * s * slope:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            # near the optimum the certifiable decrease falls below the
            # floating-point resolution of the objective; the undamped Newton
            # step still contracts the gradient, so take it if it is safe
            if objective(l + step) <= r0 * (1.0 + 1e-12):
                s = 1.0
            else:
                raise ConvexSolverError(
                    "line search failed; weights are too ill-conditioned for the oracle"
                )
        l = l + s * step
    else:
        raise ConvexSolverError(
            f"no convergence after {max_iter} Newton iterations (grad={grad_norm:.3e})"
        )

    z = z_of(l)
    config = SelfConsistentConfig({e: float(zz) for e, zz in zip(edges, z)})
    lam = {}
    for u in net.units:
        lam[u.id] = float(math.exp(l[col[u.id]])) if u.id in col else 1.0
    residuals = [constraint_residual(net, c, config) for c in problem.constraints]
    return ConvexSolution(
        config,
        MultiplierAssignment(lam),
        objective(l) * scale,
        grad_norm,
        iterations,
        residuals,
    )


def apply_multipliers(net: Network, assignment: MultiplierAssignment) -> Network:
    """Rescale every edge by Lambda_dst / Lambda_src**c_src."""
    lam = assignment.lambda_per_unit
    edges = []
    for e in net.edges:
        f = lam.get(e.dst, 1.0) / lam.get(e.src, 1.0) ** _exponent_or_one(net, e.src)
        edges.append(Edge(e.src, e.dst, e.weight * f))
    return Network(net.units, edges, net.recurrent, net.unroll_steps)


def tied_layer_closed_form(layer_norms) -> list:
    """Per-matrix multipliers of the tied-layer balanced state (L2 cost).

    ``layer_norms`` holds the squared Frobenius norms n_i of the N consecutive
    inter-layer matrices.  Minimizing sum_i M_i**2 * n_i subject to
    prod M_i = 1 gives M_i = (prod_k n_k)**(1/(2N)) / sqrt(n_i): the scaled
    matrices all share the same norm and the multipliers multiply to one.
    """
    norms = [float(n) for n in layer_norms]
    if not norms:
        raise ValueError("need at least one layer norm")
    for k, n in enumerate(norms):
        if not n > 0.0:
            raise ValueError(f"layer {k}: squared norm must be > 0, got {n}")
    logs = [math.log(n) for n in norms]
    mean = sum(logs) / len(logs)
    return [math.exp(0.5 * (mean - l)) for l in logs]


def _strongly_connected(adj):
    """Iterative Tarjan SCC over an adjacency dict; returns sorted components."""
    index = {}
    low = {}
    onstack = set()
    stack = []
    result = []
    counter = [0]
    for root in sorted(adj):
        if root in index:
            continue
        work = [(root, iter(adj[root]))]
        index[root] = low[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        onstack.add(root)
        while work:
            u, it = work[-1]
            advanced = False
            for v in it:
                if v not in index:
                    index[v] = low[v] = counter[0]
                    counter[0] += 1
                    stack.append(v)
                    onstack.add(v)
                    work.append((v, iter(adj[v])))
                    advanced = True
                    break
                if v in onstack:
                    low[u] = min(low[u], index[v])
            if advanced:
                continue
            work.pop()
            if work:
                pu = work[-1][0]
                low[pu] = min(low[pu], low[u])
            if low[u] == index[u]:
                comp = []
                while True:
                    v = stack.pop()
                    onstack.discard(v)
                    comp.append(v)
                    if v == u:
                        break
                result.append(sorted(comp))
    return sorted(result)
