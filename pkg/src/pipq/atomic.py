"""Atomic words and the parity-encoded sequence lock.

The ``atomics`` package provides lock-free hardware CAS / fetch-and-or /
fetch-and-add on a 64-bit word; these are thin typed wrappers over it.
"""

import time
from typing import Optional

import atomics


def pause() -> None:
    """Spin-loop pause hint; yields the interpreter to the lock holder."""
    time.sleep(0)


class AtomicWord:
    """A 64-bit atomic word (unsigned by default)."""

    __slots__ = ("_a",)

    def __init__(self, initial: int = 0, signed: bool = False) -> None:
        self._a = atomics.atomic(width=8, atype=atomics.INT if signed else atomics.UINT)
        self._a.store(initial)

    def load(self) -> int:
        """Current value."""
        return self._a.load()

    def store(self, value: int) -> None:
        """Overwrite the word."""
        self._a.store(value)

    def cas(self, expected: int, desired: int) -> bool:
        """Compare-and-swap; True when the word held ``expected``."""
        return self._a.cmpxchg_strong(expected=expected, desired=desired).success

    def fetch_or(self, bits: int) -> int:
        """Set ``bits`` and return the previous value."""
        return self._a.bin_fetch_or(bits)

    def fetch_add(self, delta: int) -> int:
        """Add ``delta`` and return the previous value."""
        return self._a.fetch_add(delta)

    def add_and_fetch(self, delta: int) -> int:
        """Add ``delta`` and return the new value."""
        return self._a.fetch_add(delta) + delta

    def __repr__(self) -> str:
        return f"AtomicWord({self.load()})"


class SeqLock:
    """Sequence lock: even counter = unlocked, odd = locked.

    Acquisition CASes an observed even value ``v`` to ``v + 1``; release
    advances to ``v + 2``, so the counter is monotone across lock generations.
    """

    __slots__ = ("_word",)

    def __init__(self) -> None:
        self._word = AtomicWord(0)

    @property
    def value(self) -> int:
        """Raw counter; odd while held."""
        return self._word.load()

    def is_locked(self) -> bool:
        """True while some thread holds the lock."""
        return self._word.load() % 2 == 1

    def try_acquire(self) -> Optional[int]:
        """One acquisition attempt; returns the token or None if busy."""
        lock_val = self._word.load()
        if lock_val % 2 == 0 and self._word.cas(lock_val, lock_val + 1):
            return lock_val
        return None

    def acquire(self) -> int:
        """Spin until acquired; returns the token to hand to ``release``."""
        while True:
            token = self.try_acquire()
            if token is not None:
                return token
            pause()

    def release(self, token: int) -> None:
        """Release a lock acquired with ``token``."""
        if not self._word.cas(token + 1, token + 2):
            raise AssertionError(f"release of lock not held (counter {self.value}, token {token})")

    def __repr__(self) -> str:
        return f"SeqLock({self.value})"
