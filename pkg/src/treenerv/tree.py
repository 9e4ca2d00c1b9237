"""AVL-balanced search tree over temporal keys with trainable feature values."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, lerp_combine

__all__ = [
    "FeatureNode",
    "TreeGrid",
    "BoundPair",
    "ValidationReport",
    "uniform_keys",
]


class FeatureNode:
    __slots__ = ("key", "value", "height", "left", "right")

    def __init__(self, key: float, value: Tensor):
        self.key = float(key)
        self.value = value
        self.height = 0
        self.left: Optional[FeatureNode] = None
        self.right: Optional[FeatureNode] = None

    @property
    def balance(self) -> int:
        return _h(self.left) - _h(self.right)

    def __repr__(self) -> str:
        return f"FeatureNode(key={self.key}, height={self.height})"


def _h(node: Optional[FeatureNode]) -> int:
    # empty subtree sits one below a leaf
    return node.height if node is not None else -1


def _update(node: FeatureNode) -> None:
    node.height = 1 + max(_h(node.left), _h(node.right))


def rotate_right(node: FeatureNode) -> FeatureNode:
    pivot = node.left
    node.left = pivot.right
    pivot.right = node
    _update(node)
    _update(pivot)
    return pivot


def rotate_left(node: FeatureNode) -> FeatureNode:
    pivot = node.right
    node.right = pivot.left
    pivot.left = node
    _update(node)
    _update(pivot)
    return pivot


def rebalance(node: FeatureNode) -> FeatureNode:
    """Restore |balance| <= 1 at ``node`` using the four-case rotation table."""
    _update(node)
    beta = node.balance
    if beta > 1:
        if node.left.balance < 0:
            node.left = rotate_left(node.left)
        return rotate_right(node)
    if beta < -1:
        if node.right.balance > 0:
            node.right = rotate_right(node.right)
        return rotate_left(node)
    return node


@dataclass(frozen=True)
class BoundPair:
    lower_key: float
    lower: Tensor
    upper_key: float
    upper: Tensor
    visited: int = 0

    @property
    def exact(self) -> bool:
        return self.lower is self.upper


@dataclass
class ValidationReport:
    ok: bool
    message: str = "ok"

    def __bool__(self) -> bool:
        return self.ok


def uniform_keys(length: int, count: int) -> list[float]:
    if count < 2:
        raise ValueError(f"need at least 2 nodes for interpolation, got {count}")
    if count > length:
        raise ValueError(f"node count {count} exceeds sequence length {length}")
    # integer numerator keeps every key correctly rounded and both ends exact
    return [i * (length - 1) / (count - 1) for i in range(count)]


def _default_init(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return rng.uniform(-1e-2, 1e-2, size=shape)


class TreeGrid:
    """Temporal feature grid stored in an AVL tree.

    Keys are frame-index times (real-valued so midpoints are legal); values
    are ``h x w x d`` tensors that receive gradients through
    :meth:`time_embedding`.
    """

    def __init__(self, value_shape: Sequence[int], length: int):
        self.root: Optional[FeatureNode] = None
        self.node_count = 0
        self.value_shape = tuple(int(v) for v in value_shape)
        self.length = int(length)

    @property
    def key_domain(self) -> tuple[float, float]:
        return 0.0, float(self.length - 1)

    @property
    def height(self) -> int:
        return _h(self.root)

    def __len__(self) -> int:
        return self.node_count

    @classmethod
    def from_uniform(
        cls,
        length: int,
        count: int,
        value_shape: Sequence[int],
        value_init: Optional[Callable[[np.random.Generator, tuple], np.ndarray]] = None,
        seed: int = 0,
        dtype=np.float32,
    ) -> "TreeGrid":
        grid = cls(value_shape, length)
        rng = np.random.default_rng(seed)
        init = value_init or _default_init
        for key in uniform_keys(length, count):
            value = np.asarray(init(rng, grid.value_shape), dtype=dtype)
            grid.insert(key, Tensor(value, requires_grad=True, dtype=dtype))
        return grid

    @classmethod
    def from_preorder(cls, items: Sequence[tuple[float, Tensor]], value_shape, length: int) -> "TreeGrid":
        """Rebuild the exact node layout from a pre-order stream."""
        grid = cls(value_shape, length)
        pos = 0

        def build(lo: float, hi: float) -> Optional[FeatureNode]:
            nonlocal pos
            if pos >= len(items) or not (lo < items[pos][0] < hi):
                return None
            key, value = items[pos]
            pos += 1
            node = FeatureNode(key, value)
            node.left = build(lo, key)
            node.right = build(key, hi)
            _update(node)
            return node

        grid.root = build(-np.inf, np.inf)
        if pos != len(items):
            raise ValueError(f"pre-order stream is not a valid search tree (stopped at item {pos} of {len(items)})")
        grid.node_count = len(items)
        report = grid.validate()
        if not report:
            raise ValueError(f"pre-order stream does not describe an AVL tree: {report.message}")
        return grid

    # -- traversal ------------------------------------------------------------

    def nodes(self) -> Iterator[FeatureNode]:
        """In-order traversal."""
        stack: list[FeatureNode] = []
        node = self.root
        while stack or node is not None:
            while node is not None:
                stack.append(node)
                node = node.left
            node = stack.pop()
            yield node
            node = node.right

    def preorder(self) -> Iterator[FeatureNode]:
        stack = [self.root] if self.root is not None else []
        while stack:
            node = stack.pop()
            yield node
            if node.right is not None:
                stack.append(node.right)
            if node.left is not None:
                stack.append(node.left)

    def in_order_keys(self) -> list[float]:
        return [n.key for n in self.nodes()]

    def parameters(self) -> list[Tensor]:
        return [n.value for n in self.nodes()]

    def find(self, key: float) -> Optional[FeatureNode]:
        node = self.root
        while node is not None:
            if key == node.key:
                return node
            node = node.left if key < node.key else node.right
        return None

    # -- queries --------------------------------------------------------------

    def query_bounds(self, t: float) -> BoundPair:
        """Single descent that tracks running lower/upper candidates.

        An exact key hit returns that node as both bounds. Queries outside
        the key range clamp to the nearest end node.
        """
        if self.root is None:
            raise LookupError("query on an empty tree")
        lower: Optional[FeatureNode] = None
        upper: Optional[FeatureNode] = None
        node = self.root
        visited = 0
        while node is not None:
            visited += 1
            if t == node.key:
                return BoundPair(node.key, node.value, node.key, node.value, visited)
            if t < node.key:
                upper = node
                node = node.left
            else:
                lower = node
                node = node.right
        if lower is None:
            lower = upper
        if upper is None:
            upper = lower
        return BoundPair(lower.key, lower.value, upper.key, upper.value, visited)

    @staticmethod
    def weights(bounds: BoundPair, t: float) -> tuple[float, float]:
        d_l = abs(t - bounds.lower_key)
        d_u = abs(bounds.upper_key - t)
        total = d_l + d_u
        if total == 0.0 or bounds.lower is bounds.upper:
            return 1.0, 0.0
        return d_u / total, d_l / total

    def time_embedding(self, t: float) -> Tensor:
        bounds = self.query_bounds(t)
        w_l, w_u = self.weights(bounds, t)
        return lerp_combine(bounds.lower, bounds.upper, w_l, w_u)

    # -- mutation -------------------------------------------------------------

    def insert(self, key: float, value: Tensor) -> None:
        key = float(key)
        if tuple(value.shape) != self.value_shape:
            raise ShapeError(f"node value shape {tuple(value.shape)} != grid value shape {self.value_shape}")
        lo, hi = self.key_domain
        if not lo <= key <= hi:
            raise ValueError(f"key {key} outside domain [{lo}, {hi}]")
        path: list[FeatureNode] = []
        node = self.root
        while node is not None:
            if key == node.key:
                raise KeyError(f"duplicate key {key}")
            path.append(node)
            node = node.left if key < node.key else node.right
        new = FeatureNode(key, value)
        if not path:
            self.root = new
        elif key < path[-1].key:
            path[-1].left = new
        else:
            path[-1].right = new
        self.node_count += 1
        # retrace from the parent upward, reattaching rotated subtrees
        for i in range(len(path) - 1, -1, -1):
            anc = path[i]
            sub = rebalance(anc)
            if i == 0:
                self.root = sub
            elif path[i - 1].left is anc:
                path[i - 1].left = sub
            else:
                path[i - 1].right = sub

    def midpoint_insert(self, k_l: float, k_u: float) -> float:
        """Insert a node halfway between two adjacent keys.

        The new value is the interpolated embedding at the midpoint, copied
        into an independent trainable tensor.
        """
        if not k_l < k_u:
            raise ValueError(f"bounds must satisfy k_l < k_u, got ({k_l}, {k_u})")
        lo_node, hi_node = self.find(k_l), self.find(k_u)
        if lo_node is None or hi_node is None:
            raise KeyError(f"bounds ({k_l}, {k_u}) are not both existing keys")
        bounds = self.query_bounds((k_l + k_u) / 2.0)
        if bounds.lower_key != k_l or bounds.upper_key != k_u:
            raise ValueError(f"keys {k_l} and {k_u} are not adjacent")
        k_in = (k_l + k_u) / 2.0
        if k_in in (k_l, k_u):
            raise ValueError(f"interval ({k_l}, {k_u}) too narrow to split")
        w_l, w_u = self.weights(bounds, k_in)
        dtype = lo_node.value.data.dtype
        data = (w_l * lo_node.value.data.astype(np.float64) + w_u * hi_node.value.data.astype(np.float64)).astype(dtype)
        self.insert(k_in, Tensor(data, requires_grad=True, dtype=dtype))
        return k_in

    # -- checks ---------------------------------------------------------------

    def validate(self) -> ValidationReport:
        """Check ordering, stored heights, balance and node count; never raises."""
        count = 0
        lo_dom, hi_dom = self.key_domain
        # (node, lower bound, upper bound, visited-children flag)
        stack: list = [(self.root, -np.inf, np.inf, False)] if self.root is not None else []
        heights: dict[int, int] = {}
        while stack:
            node, lo, hi, expanded = stack.pop()
            if not expanded:
                count += 1
                if not lo < node.key < hi:
                    return ValidationReport(False, f"order violated at key {node.key} (allowed range ({lo}, {hi}))")
                if not lo_dom <= node.key <= hi_dom:
                    return ValidationReport(False, f"key {node.key} outside domain [{lo_dom}, {hi_dom}]")
                if tuple(node.value.shape) != self.value_shape:
                    return ValidationReport(False, f"value shape {node.value.shape} at key {node.key}")
                stack.append((node, lo, hi, True))
                if node.right is not None:
                    stack.append((node.right, node.key, hi, False))
                if node.left is not None:
                    stack.append((node.left, lo, node.key, False))
            else:
                hl = heights.get(id(node.left), -1) if node.left is not None else -1
                hr = heights.get(id(node.right), -1) if node.right is not None else -1
                true_h = 1 + max(hl, hr)
                if node.height != true_h:
                    return ValidationReport(False, f"height mismatch at key {node.key}: stored {node.height}, actual {true_h}")
                if abs(hl - hr) > 1:
                    return ValidationReport(False, f"balance factor {hl - hr} at key {node.key}")
                heights[id(node)] = true_h
        if count != self.node_count:
            return ValidationReport(False, f"node_count {self.node_count} but {count} reachable nodes")
        return ValidationReport(True)

    def structure(self):
        """Nested ``(key, left, right)`` tuples; handy for structural comparisons."""

        def rec(node):
            if node is None:
                return None
            return (node.key, rec(node.left), rec(node.right))

        return rec(self.root)
