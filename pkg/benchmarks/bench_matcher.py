"""Compare the compiled and pure-Python matcher kernels.

Two measurements per backend:

* kernel: one ``advance`` call over a hash shared by every sequence in the
  database (the dense worst case the bit-parallel loop exists for);
* stream: end-to-end ``matcher_step`` over a random stream drawn from a
  small alphabet, including index lookup and verdict construction.

Usage: python benchmarks/bench_matcher.py [--k 4096] [--length 32] [--steps 20000]
"""

import argparse
import hashlib
import random
import timeit

from badsim.threat import BACKENDS, AttackSequence, MatcherState, ThreatDatabase, matcher_step
from badsim.threat.matcher import _Index


def h(label) -> bytes:
    return hashlib.sha256(str(label).encode()).digest()


def dense_db(k: int, length: int) -> ThreatDatabase:
    return ThreatDatabase([AttackSequence(i + 1, (h("hot"),) * length) for i in range(k)],
                          capacity=None, max_length=64)


def random_db(k: int, length: int, alphabet: int, rng: random.Random) -> ThreatDatabase:
    symbols = [h(n) for n in range(alphabet)]
    return ThreatDatabase([AttackSequence(i + 1, tuple(rng.choice(symbols) for _ in range(length)))
                           for i in range(k)], max_length=64)


def bench_kernel(backend: str, db: ThreatDatabase, repeat: int) -> float:
    from array import array
    kernel = BACKENDS[backend]
    idx = _Index(db)
    entries = array("Q", bytes(8 * len(idx.ids)))
    start, stop = idx.rows[h("hot")]

    def once():
        kernel.advance(entries, start, stop, idx.seq_idx, idx.pos_mask, idx.touched, idx.formed)

    return min(timeit.repeat(once, number=repeat, repeat=3)) / repeat


def bench_stream(backend: str, db: ThreatDatabase, stream) -> float:
    def once():
        st = MatcherState(backend)
        for x in stream:
            matcher_step(st, db, x)

    return min(timeit.repeat(once, number=1, repeat=3)) / len(stream)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--k", type=int, default=4096)
    p.add_argument("--length", type=int, default=32)
    p.add_argument("--alphabet", type=int, default=64)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--seed", type=int, default=1)
    args = p.parse_args(argv)

    rng = random.Random(args.seed)
    dense = dense_db(args.k, args.length)
    mixed = random_db(args.k, args.length, args.alphabet, rng)
    symbols = [h(n) for n in range(args.alphabet)]
    stream = [rng.choice(symbols) for _ in range(args.steps)]

    print(f"k={args.k} length={args.length} alphabet={args.alphabet} steps={args.steps}")
    print(f"{'backend':<10}{'kernel us/call':>16}{'stream us/step':>16}")
    results = {}
    for backend in sorted(BACKENDS):
        kern = bench_kernel(backend, dense, repeat=20)
        strm = bench_stream(backend, mixed, stream)
        results[backend] = (kern, strm)
        print(f"{backend:<10}{kern * 1e6:>16.1f}{strm * 1e6:>16.2f}")
    if "compiled" in results:
        (pk, ps), (ck, cs) = results["python"], results["compiled"]
        print(f"speedup   {pk / ck:>15.1f}x{ps / cs:>15.1f}x")
    else:
        print("compiled kernel not built; only the Python fallback was measured")


if __name__ == "__main__":
    main()
