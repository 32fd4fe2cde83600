"""Red-black tree: an ordered map with worst-case O(log n) operations.

Keys must form a total order under ``<`` (bytes and ints here).  In-order
iteration yields strictly increasing keys, and the tree height never
exceeds 2*log2(n + 1), which is what the storage layer's balance
guarantees rest on.

Not thread-safe on its own; every tree in this package is guarded by a
shared-exclusive lock owned by its container.
"""
from __future__ import annotations

from typing import Any, Iterator

RED = 0
BLACK = 1


class _Node:
    __slots__ = ("key", "value", "left", "right", "parent", "color")

    def __init__(self, key: Any = None, value: Any = None) -> None:
        self.key = key
        self.value = value
        self.left = self
        self.right = self
        self.parent = self
        self.color = BLACK


class RBTree:
    """Ordered map keyed by any totally ordered type."""

    __slots__ = ("_nil", "_root", "_count")

    def __init__(self) -> None:
        self._nil = _Node()
        self._root = self._nil
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def find(self, key) -> Any | None:
        nil = self._nil
        node = self._root
        while node is not nil:
            if key == node.key:
                return node.value
            node = node.left if key < node.key else node.right
        return None

    def insert(self, key, value) -> Any | None:
        """Insert or replace. Returns the previous value, or None if new."""
        nil = self._nil
        parent = nil
        node = self._root
        while node is not nil:
            parent = node
            if key == node.key:
                old = node.value
                node.value = value
                return old
            node = node.left if key < node.key else node.right
        new = _Node(key, value)
        new.left = new.right = nil
        new.parent = parent
        new.color = RED
        if parent is nil:
            self._root = new
        elif key < parent.key:
            parent.left = new
        else:
            parent.right = new
        self._count += 1
        self._insert_fixup(new)
        return None

    def remove(self, key) -> Any | None:
        """Remove a key. Returns its value, or None if absent."""
        nil = self._nil
        z = self._root
        while z is not nil and key != z.key:
            z = z.left if key < z.key else z.right
        if z is nil:
            return None
        old = z.value
        y = z
        y_color = y.color
        if z.left is nil:
            x = z.right
            self._transplant(z, z.right)
        elif z.right is nil:
            x = z.left
            self._transplant(z, z.left)
        else:
            y = self._minimum(z.right)
            y_color = y.color
            x = y.right
            if y.parent is z:
                x.parent = y  # x may be the sentinel; fixup needs its parent
            else:
                self._transplant(y, y.right)
                y.right = z.right
                y.right.parent = y
            self._transplant(z, y)
            y.left = z.left
            y.left.parent = y
            y.color = z.color
        self._count -= 1
        if y_color == BLACK:
            self._delete_fixup(x)
        return old

    def __iter__(self) -> Iterator[tuple[Any, Any]]:
        """In-order (key, value) pairs, strictly increasing by key."""
        nil = self._nil
        stack: list[_Node] = []
        node = self._root
        while stack or node is not nil:
            while node is not nil:
                stack.append(node)
                node = node.left
            node = stack.pop()
            yield node.key, node.value
            node = node.right

    def iter_from(self, lo) -> Iterator[tuple[Any, Any]]:
        """In-order pairs starting at the first key >= lo."""
        nil = self._nil
        stack: list[_Node] = []
        node = self._root
        while node is not nil:
            if node.key >= lo:
                stack.append(node)
                node = node.left
            else:
                node = node.right
        while stack:
            node = stack.pop()
            yield node.key, node.value
            node = node.right
            while node is not nil:
                stack.append(node)
                node = node.left

    def height(self) -> int:
        nil = self._nil

        def depth(node: _Node) -> int:
            if node is nil:
                return 0
            return 1 + max(depth(node.left), depth(node.right))

        return depth(self._root)

    # -- internals (CLRS-style, with a per-tree sentinel) --

    def _rotate_left(self, x: _Node) -> None:
        nil = self._nil
        y = x.right
        x.right = y.left
        if y.left is not nil:
            y.left.parent = x
        y.parent = x.parent
        if x.parent is nil:
            self._root = y
        elif x is x.parent.left:
            x.parent.left = y
        else:
            x.parent.right = y
        y.left = x
        x.parent = y

    def _rotate_right(self, x: _Node) -> None:
        nil = self._nil
        y = x.left
        x.left = y.right
        if y.right is not nil:
            y.right.parent = x
        y.parent = x.parent
        if x.parent is nil:
            self._root = y
        elif x is x.parent.right:
            x.parent.right = y
        else:
            x.parent.left = y
        y.right = x
        x.parent = y

    def _insert_fixup(self, z: _Node) -> None:
        while z.parent.color == RED:
            if z.parent is z.parent.parent.left:
                y = z.parent.parent.right
                if y.color == RED:
                    z.parent.color = BLACK
                    y.color = BLACK
                    z.parent.parent.color = RED
                    z = z.parent.parent
                else:
                    if z is z.parent.right:
                        z = z.parent
                        self._rotate_left(z)
                    z.parent.color = BLACK
                    z.parent.parent.color = RED
                    self._rotate_right(z.parent.parent)
            else:
                y = z.parent.parent.left
                if y.color == RED:
                    z.parent.color = BLACK
                    y.color = BLACK
                    z.parent.parent.color = RED
                    z = z.parent.parent
                else:
                    if z is z.parent.left:
                        z = z.parent
                        self._rotate_right(z)
                    z.parent.color = BLACK
                    z.parent.parent.color = RED
                    self._rotate_left(z.parent.parent)
        self._root.color = BLACK

    def _transplant(self, u: _Node, v: _Node) -> None:
        if u.parent is self._nil:
            self._root = v
        elif u is u.parent.left:
            u.parent.left = v
        else:
            u.parent.right = v
        v.parent = u.parent

    def _minimum(self, node: _Node) -> _Node:
        while node.left is not self._nil:
            node = node.left
        return node

    def _delete_fixup(self, x: _Node) -> None:
        while x is not self._root and x.color == BLACK:
            if x is x.parent.left:
                w = x.parent.right
                if w.color == RED:
                    w.color = BLACK
                    x.parent.color = RED
                    self._rotate_left(x.parent)
                    w = x.parent.right
                if w.left.color == BLACK and w.right.color == BLACK:
                    w.color = RED
                    x = x.parent
                else:
                    if w.right.color == BLACK:
                        w.left.color = BLACK
                        w.color = RED
                        self._rotate_right(w)
                        w = x.parent.right
                    w.color = x.parent.color
                    x.parent.color = BLACK
                    w.right.color = BLACK
                    self._rotate_left(x.parent)
                    x = self._root
            else:
                w = x.parent.left
                if w.color == RED:
                    w.color = BLACK
                    x.parent.color = RED
                    self._rotate_right(x.parent)
                    w = x.parent.left
                if w.right.color == BLACK and w.left.color == BLACK:
                    w.color = RED
                    x = x.parent
                else:
                    if w.left.color == BLACK:
                        w.right.color = BLACK
                        w.color = RED
                        self._rotate_left(w)
                        w = x.parent.left
                    w.color = x.parent.color
                    x.parent.color = BLACK
                    w.left.color = BLACK
                    self._rotate_right(x.parent)
                    x = self._root
        x.color = BLACK
