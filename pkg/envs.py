#!/usr/bin/env python3
"""
Desk-scale environments.

ProcGridEnv is a procedurally generated gridworld: each level is a pure
function of its seed, train and test levels come from disjoint seed ranges,
and observations are one-hot channel planes flattened for an MLP encoder.
The tree helpers build exact shortest-path metrics for the embedding
benchmark and for the hyperbolicity checks.
"""

import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Tuple

import networkx as nx
import numpy as np

from hyperbolicity import DistanceMatrix

log = logging.getLogger(__name__)

Cell = Tuple[int, int]

UP, DOWN, LEFT, RIGHT = range(4)
N_ACTIONS = 4
MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
N_CHANNELS = 5  # wall, agent, goal, hazard, collectible

GOAL_REWARD = 1.0
HAZARD_REWARD = -1.0
COLLECT_REWARD = 0.1

TEST_SEED_OFFSET = 1000
MAX_REGEN = 1000
MAX_TREE_NODES = 4096
MASK64 = (1 << 64) - 1


class EnvError(ValueError):
    """Invalid level, action or tree shape"""


def splitmix64(seed):
    """Seed remix used when a generated level is unsolvable"""
    z = (seed + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def train_seeds(n=32):
    return list(range(n))


def test_seeds(n=200):
    return list(range(TEST_SEED_OFFSET, TEST_SEED_OFFSET + n))


# -- gridworld ----------------------------------------------------------------

@dataclass(eq=False)
class ProcGridEnv:
    size: int
    walls: np.ndarray
    agent: Cell
    goal: Cell
    hazards: FrozenSet[Cell] = frozenset()
    collectibles: FrozenSet[Cell] = frozenset()
    step_cap: int = 64
    seed: int = -1
    position: Cell = field(init=False)
    remaining: set = field(init=False)
    steps: int = field(init=False, default=0)
    done: bool = field(init=False, default=False)

    def __post_init__(self):
        self.walls = np.asarray(self.walls, dtype=bool)
        if self.walls.shape != (self.size, self.size):
            raise EnvError(f"wall mask shape {self.walls.shape} does not match size {self.size}")
        self.hazards = frozenset(map(tuple, self.hazards))
        self.collectibles = frozenset(map(tuple, self.collectibles))
        for cell in (self.agent, self.goal, *self.hazards, *self.collectibles):
            if not self._inside(cell) or self.walls[cell]:
                raise EnvError(f"cell {cell} is outside the grid or on a wall")
        if self.step_cap < 1:
            raise EnvError(f"step cap must be positive, got {self.step_cap}")
        self.reset()

    @property
    def obs_dim(self):
        return N_CHANNELS * self.size * self.size

    def _inside(self, cell):
        r, c = cell
        return 0 <= r < self.size and 0 <= c < self.size

    def reset(self):
        self.position = tuple(self.agent)
        self.remaining = set(self.collectibles)
        self.steps = 0
        self.done = False
        return self.observe()

    def observe(self):
        planes = np.zeros((N_CHANNELS, self.size, self.size))
        planes[0] = self.walls
        planes[1][self.position] = 1.0
        planes[2][self.goal] = 1.0
        for cell in self.hazards:
            planes[3][cell] = 1.0
        for cell in self.remaining:
            planes[4][cell] = 1.0
        return planes.reshape(-1)

    def step(self, action):
        """Returns (obs, reward, done)"""
        if self.done:
            raise EnvError("step called on a finished episode; call reset()")
        if action not in MOVES:
            raise EnvError(f"unknown action {action!r}")
        dr, dc = MOVES[int(action)]
        target = (self.position[0] + dr, self.position[1] + dc)
        if self._inside(target) and not self.walls[target]:
            self.position = target
        self.steps += 1

        reward = 0.0
        if self.position in self.remaining:
            self.remaining.discard(self.position)
            reward += COLLECT_REWARD
        if self.position == self.goal:
            reward += GOAL_REWARD
            self.done = True
        elif self.position in self.hazards:
            reward += HAZARD_REWARD
            self.done = True
        if self.steps >= self.step_cap:
            self.done = True
        return self.observe(), reward, self.done


def _grid_graph(walls, blocked=()):
    G = nx.grid_2d_graph(*walls.shape)
    G.remove_nodes_from([tuple(c) for c in np.argwhere(walls)])
    G.remove_nodes_from(blocked)
    return G


def solvable(env):
    """BFS reachability of the goal avoiding walls and hazards"""
    G = _grid_graph(env.walls, env.hazards)
    return G.has_node(env.agent) and G.has_node(env.goal) and nx.has_path(G, env.agent, env.goal)


def _layout(seed, size, wall_density, n_hazards, n_collectibles, step_cap):
    rng = np.random.default_rng(seed)
    walls = rng.random((size, size)) < wall_density
    free = [tuple(int(v) for v in c) for c in np.argwhere(~walls)]
    need = 2 + n_hazards + n_collectibles
    if len(free) < need:
        return None
    picks = rng.choice(len(free), size=need, replace=False)
    cells = [free[i] for i in picks]
    return ProcGridEnv(size, walls, cells[0], cells[1],
                       frozenset(cells[2:2 + n_hazards]), frozenset(cells[2 + n_hazards:]),
                       step_cap=step_cap, seed=seed)


def generate_level(seed, size=9, wall_density=0.2, n_hazards=2, n_collectibles=3, step_cap=64):
    """Deterministic solvable level for a u64 seed"""
    if size < 2:
        raise EnvError(f"grid size must be at least 2, got {size}")
    s = int(seed) & MASK64
    for attempt in range(MAX_REGEN):
        env = _layout(s, size, wall_density, n_hazards, n_collectibles, step_cap)
        if env is not None and solvable(env):
            env.seed = int(seed)
            if attempt:
                log.debug("level %d solvable after %d regenerations", seed, attempt)
            return env
        s = splitmix64(s)
    raise EnvError(f"no solvable level for seed {seed} after {MAX_REGEN} retries")


def empty_level(size=3, step_cap=64):
    """Open grid with the agent top-left and the goal bottom-right"""
    return ProcGridEnv(size, np.zeros((size, size), dtype=bool), (0, 0), (size - 1, size - 1),
                       step_cap=step_cap, seed=0)


def make_level_factory(kind="procgrid", size=9, step_cap=64):
    """Seed -> fresh env, cached per seed"""
    if kind not in ("procgrid", "empty"):
        raise EnvError(f"unknown level kind {kind!r} (procgrid | empty)")
    cache = {}

    def make(seed):
        if seed not in cache:
            cache[seed] = (generate_level(seed, size=size, step_cap=step_cap) if kind == "procgrid"
                           else empty_level(size, step_cap))
        env = cache[seed]
        return ProcGridEnv(env.size, env.walls, env.agent, env.goal, env.hazards,
                           env.collectibles, env.step_cap, env.seed)

    return make


def render(env):
    """ASCII map: # wall, A agent, G goal, X hazard, * collectible"""
    rows = []
    for r in range(env.size):
        line = []
        for c in range(env.size):
            cell = (r, c)
            if cell == env.position:
                line.append("A")
            elif env.walls[cell]:
                line.append("#")
            elif cell == env.goal:
                line.append("G")
            elif cell in env.hazards:
                line.append("X")
            elif cell in env.remaining:
                line.append("*")
            else:
                line.append(".")
        rows.append("".join(line))
    return "\n".join(rows)


class VecEnv:
    """k independent levels stepped in index order with auto-reset"""

    def __init__(self, make, seeds, num_envs, rng):
        if num_envs < 1:
            raise EnvError(f"num_envs must be positive, got {num_envs}")
        if not seeds:
            raise EnvError("VecEnv needs at least one level seed")
        self.make = make
        self.seeds = list(seeds)
        self.rng = rng
        self.envs = [self._fresh() for _ in range(num_envs)]
        self.returns = np.zeros(num_envs)

    def _fresh(self):
        return self.make(self.seeds[int(self.rng.integers(len(self.seeds)))])

    @property
    def num_envs(self):
        return len(self.envs)

    @property
    def obs_dim(self):
        return self.envs[0].obs_dim

    def observe(self):
        return np.stack([env.observe() for env in self.envs])

    def step(self, actions):
        """Returns (obs, rewards, dones, finished episode returns)"""
        rewards = np.zeros(self.num_envs)
        dones = np.zeros(self.num_envs, dtype=bool)
        finished = []
        for i, env in enumerate(self.envs):
            _, rewards[i], dones[i] = env.step(int(actions[i]))
            self.returns[i] += rewards[i]
            if dones[i]:
                finished.append(float(self.returns[i]))
                self.returns[i] = 0.0
                self.envs[i] = self._fresh()
        return self.observe(), rewards, dones, finished


# -- tree metrics -------------------------------------------------------------

@dataclass(frozen=True)
class TreeSpec:
    branching: int
    depth: int

    def __post_init__(self):
        if self.branching < 1 or self.depth < 1:
            raise EnvError(f"tree needs branching >= 1 and depth >= 1, got {self.branching}, {self.depth}")

    @property
    def node_count(self):
        b, d = self.branching, self.depth
        if b == 1:
            return d + 1
        return (b ** (d + 1) - 1) // (b - 1)


def tree_distances(G, root=0):
    """All-pairs path lengths of a weighted tree via lowest common ancestors"""
    n = G.number_of_nodes()
    if sorted(G.nodes) != list(range(n)):
        raise EnvError("tree nodes must be labelled 0..n-1")
    if n and not nx.is_tree(G):
        raise EnvError("graph is not a tree")
    parent = np.full(n, -1)
    depth = np.zeros(n, dtype=np.int64)
    root_dist = np.zeros(n)
    for u, v in nx.bfs_edges(G, root):
        parent[v] = u
        depth[v] = depth[u] + 1
        root_dist[v] = root_dist[u] + G.edges[u, v].get("weight", 1)

    levels = int(depth.max()) + 1 if n else 0
    ancestors = np.full((n, levels), -1)
    for v in range(n):
        node = v
        for k in range(depth[v], -1, -1):
            ancestors[v, k] = node
            node = parent[node]

    lca_dist = np.zeros((n, n))
    for k in range(levels):
        a = ancestors[:, k]
        same = (a[:, None] == a[None, :]) & (a[:, None] >= 0)
        lca_dist = np.where(same, root_dist[np.maximum(a, 0)][:, None], lca_dist)
    D = root_dist[:, None] + root_dist[None, :] - 2.0 * lca_dist
    np.fill_diagonal(D, 0.0)
    return DistanceMatrix(D)


def _check_budget(n):
    if n > MAX_TREE_NODES:
        raise EnvError(f"tree has {n} nodes, budget is {MAX_TREE_NODES}")


def tree_metric(spec):
    """Shortest-path metric of the complete b-ary tree; root is node 0"""
    _check_budget(spec.node_count)
    G = nx.balanced_tree(spec.branching, spec.depth)
    return tree_distances(G), list(G.nodes)


def tree_graph(spec):
    _check_budget(spec.node_count)
    return nx.balanced_tree(spec.branching, spec.depth)


def radial_layout(G, root=0):
    """Polar drawing of a tree: (radius, angle) per node

    The radius is the path length from the root and the angle the middle of
    the node's share of the leaves in depth-first order, so subtrees occupy
    disjoint wedges.
    """
    n = G.number_of_nodes()
    if sorted(G.nodes) != list(range(n)) or (n and not nx.is_tree(G)):
        raise EnvError("radial layout needs a tree labelled 0..n-1")
    tree = nx.bfs_tree(G, root)
    leaves = [v for v in nx.dfs_preorder_nodes(tree, root) if tree.out_degree(v) == 0]
    rank = {v: k for k, v in enumerate(leaves)}
    lo, hi = np.zeros(n), np.zeros(n)
    for v in nx.dfs_postorder_nodes(tree, root):
        kids = list(tree.successors(v))
        lo[v] = min(lo[k] for k in kids) if kids else rank[v]
        hi[v] = max(hi[k] for k in kids) if kids else rank[v] + 1
    lengths = nx.single_source_dijkstra_path_length(G, root)
    radius = np.array([lengths[v] for v in range(n)], dtype=np.float64)
    return radius, np.pi * (lo + hi) / len(leaves)


def path_metric(n):
    _check_budget(n)
    return tree_distances(nx.path_graph(n))


def star_metric(n):
    """Star with centre 0 and n - 1 leaves"""
    _check_budget(n)
    return tree_distances(nx.star_graph(n - 1))


def random_tree_metric(n, rng, max_weight=5):
    """Random recursive tree with integer edge weights in [1, max_weight]"""
    _check_budget(n)
    G = nx.Graph()
    G.add_node(0)
    for v in range(1, n):
        G.add_edge(int(rng.integers(v)), v, weight=int(rng.integers(1, max_weight + 1)))
    return tree_distances(G)
