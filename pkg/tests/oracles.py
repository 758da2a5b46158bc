"""Independent numpy re-implementations used as test oracles."""

import math

import numpy as np

SQRT2 = math.sqrt(2.0)


def grid_neighbors(cells, r, c):
    """8-connected free neighbours without corner cutting: (cell, step length)."""
    h, w = cells.shape
    out = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == dc == 0:
                continue
            rr, cc = r + dr, c + dc
            if not (0 <= rr < h and 0 <= cc < w) or cells[rr, cc]:
                continue
            if dr and dc and (cells[r, cc] or cells[rr, c]):
                continue
            out.append(((rr, cc), SQRT2 if dr and dc else 1.0))
    return out


def octile_to(shape, goal):
    out = np.zeros(shape)
    for r in range(shape[0]):
        for c in range(shape[1]):
            dx, dy = abs(r - goal[0]), abs(c - goal[1])
            out[r, c] = max(dx, dy) + (SQRT2 - 1) * min(dx, dy)
    return out


class FrozenSearch:
    """Guided search that logs every decision, then re-evaluates the soft
    selections as smooth functions of the guidance with all decisions held
    fixed. Its finite differences are the reference for the
    straight-through gradient."""

    def __init__(self, cells, start, goal, costs, tau):
        self.cells, self.start, self.goal = np.asarray(cells), start, goal
        self.costs0, self.tau = np.asarray(costs, dtype=float), tau
        self.octile = octile_to(self.cells.shape, goal)
        enterable = [(r, c) for r, c in zip(*np.nonzero(self.cells == 0)) if (r, c) != start]
        self.argmin = min(enterable, key=lambda rc: (self.costs0[rc], rc[0] * self.cells.shape[1] + rc[1]))
        self.events = []  # ("relax", nb, parent, len) | ("select", open_cells, chosen, G0, steplen)
        self.selected = []
        self.found = False
        self._run()

    def _run(self):
        c = self.costs0
        G, steplen, open_, closed = {}, {}, set(), {self.start}
        G[self.start] = 0.0

        def relax(s):
            for nb, ln in grid_neighbors(self.cells, *s):
                if nb in closed:
                    continue
                cand = G[s] + c[nb] * ln
                if nb not in open_ or cand < G[nb]:
                    G[nb], steplen[nb] = cand, ln
                    open_.add(nb)
                    self.events.append(("relax", nb, s, ln))

        relax(self.start)
        w = self.cells.shape[1]
        hscale = c[self.argmin]
        while open_:
            cells = sorted(open_, key=lambda rc: rc[0] * w + rc[1])
            f = np.array([G[v] + self.octile[v] * hscale for v in cells])
            soft = np.exp(-(f - f.min()) / self.tau)
            soft /= soft.sum()
            s = cells[int(np.argmax(soft))]
            self.events.append(("select", cells, s, {v: G[v] for v in cells}, {v: steplen[v] for v in cells}))
            self.selected.append(s)
            open_.discard(s)
            closed.add(s)
            if s == self.goal:
                self.found = True
                return
            relax(s)

    def history(self):
        P = np.zeros(self.cells.shape)
        P[self.start] = 1.0
        for s in self.selected:
            P[s] = 1.0
        return P

    def surrogate_history(self, costs, mode="chain", heuristic=True):
        costs = np.asarray(costs, dtype=float)
        hscale = costs[self.argmin] if heuristic else self.costs0[self.argmin]
        P = self.history()
        G = {self.start: 0.0}
        for ev in self.events:
            if ev[0] == "relax":
                _, nb, s, ln = ev
                G[nb] = G[s] + costs[nb] * ln
                continue
            _, cells, _, G0, steplen = ev
            if mode == "chain":
                g = np.array([G[v] for v in cells])
            else:
                g = np.array([G0[v] + (costs[v] - self.costs0[v]) * steplen[v] for v in cells])
            g0 = np.array([G0[v] for v in cells])
            h = np.array([self.octile[v] for v in cells])
            soft = self._soft(g + h * hscale)
            soft0 = self._soft(g0 + h * self.costs0[self.argmin])
            for v, a, b in zip(cells, soft, soft0):
                P[v] += a - b
        return P

    def _soft(self, f):
        e = np.exp(-(f - f.min()) / self.tau)
        return e / e.sum()

    def surrogate_loss(self, costs, truth, mode="chain", heuristic=True):
        P = self.surrogate_history(costs, mode, heuristic)
        return float(np.abs(P - truth).sum() / truth.size)
