import contextlib
import hashlib

import numpy as np
import torch


def sub_seed(master, name):
    """Derive a named 63-bit seed from a master seed.

    ``sha256(f"{master}:{name}")`` truncated to its first 8 bytes (big endian)
    and masked to 63 bits. Components that draw randomness get their own name
    so they can be perturbed independently.
    """
    digest = hashlib.sha256(f"{int(master)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


@contextlib.contextmanager
def seeded(seed):
    """Run a block with the global torch RNG seeded, restoring it afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def torch_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def checksum(tensors):
    """Hex digest over the raw bytes of a sequence of tensors."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)
