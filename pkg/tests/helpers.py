"""Shared numeric helpers for the test suite."""
import numpy as np


def central_fd(fn, arr, eps=1e-5):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        up = fn()
        arr[i] = old - eps
        down = fn()
        arr[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


ACCEPTANCE = {}


def report(criterion: int, ok: bool, detail: str) -> bool:
    """Record and print one acceptance verdict; returns ``ok`` for asserting."""
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok
