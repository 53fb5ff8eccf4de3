"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--size N] [--repeat R]

Times the raw kernels on random node-sized buffers and a full history-tree
point-query workload with each backend swapped in.
"""
import argparse
import random
import timeit
from array import array

from vspan import kernels
from vspan.sht import HistoryTree


def node_buffers(rng, n):
    pairs = sorted((s, s + rng.randrange(1, 5_000)) for s in (rng.randrange(10**6) for _ in range(n)))
    return array("q", (p[0] for p in pairs)), array("q", (p[1] for p in pairs))


def build_tree(rng, n):
    tree = HistoryTree()
    t = 0
    for _ in range(n):
        t += rng.randrange(1, 50)
        tree.set_attribute(t, ("requests", "svc", str(rng.randrange(300)), "state"), rng.randrange(7))
    tree.close(t + 1)
    return tree, t


def best(stmt, repeat, number):
    return min(timeit.repeat(stmt, repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64, help="intervals per kernel call")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    backends = {"python": kernels.load_backend("python")}
    try:
        backends["compiled"] = kernels.load_backend("compiled")
    except ImportError:
        print("compiled extension not built; only the fallback is timed")

    rng = random.Random(0)
    starts, ends = node_buffers(rng, args.size)
    probes = [rng.randrange(10**6) for _ in range(256)]
    tree, t_end = build_tree(random.Random(1), 20_000)
    queries = [random.Random(2).randrange(t_end) for _ in range(500)]

    rows = []
    for name, mod in backends.items():
        stab, cover = mod.stab, mod.covered_length
        t_stab = best(lambda: [stab(starts, ends, p) for p in probes], args.repeat, 20) / len(probes)
        t_cover = best(lambda: cover(starts, ends, 0, 10**6), args.repeat, 2000)
        saved = kernels.stab
        kernels.stab = stab
        try:
            t_query = best(lambda: [tree.stab(q) for q in queries], args.repeat, 3) / len(queries)
        finally:
            kernels.stab = saved
        rows.append((name, t_stab, t_cover, t_query))

    print(f"{'backend':<10}{'stab':>14}{'covered_length':>18}{'tree query':>14}")
    for name, a, b, c in rows:
        print(f"{name:<10}{a * 1e6:>12.2f}us{b * 1e6:>16.2f}us{c * 1e6:>12.2f}us")
    if len(rows) == 2:
        (_, a0, b0, c0), (_, a1, b1, c1) = rows
        print(f"speedup   {a0 / a1:>13.1f}x{b0 / b1:>17.1f}x{c0 / c1:>13.1f}x")


if __name__ == "__main__":
    main()
