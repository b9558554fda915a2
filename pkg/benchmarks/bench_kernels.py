"""Compare the compiled convolution kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--frames 30] [--repeat 50]

Times the speech-encoder convolution (width 400, stride 80, 64 filters) and
its kernel gradient on one utterance, checks that both backends agree bit
for bit, and prints the speed-up.
"""

import argparse
import timeit

import numpy as np

from modaladapt import _pykernels

try:
    from modaladapt import _kernels
except ImportError:
    _kernels = None


def workload(frames, seed=0):
    rng = np.random.default_rng(seed)
    width, stride, filters = 400, 80, 64
    pad = (width - stride) // 2
    wave = rng.uniform(-1, 1, size=frames * stride)
    padded = np.concatenate([np.zeros(pad), wave, np.zeros(pad)])
    kt = np.ascontiguousarray(rng.normal(size=(width, filters)) * 0.05)
    bias = rng.normal(size=filters)
    dy = np.ascontiguousarray(rng.normal(size=(frames, filters)))
    return padded, kt, bias, dy, width, stride


def time_backend(mod, args, repeat):
    padded, kt, bias, dy, width, stride = args
    frames = dy.shape[0]
    fwd = min(timeit.repeat(lambda: mod.conv1d_frames(padded, kt, bias, stride, frames),
                            number=1, repeat=repeat))
    bwd = min(timeit.repeat(lambda: mod.conv1d_kernel_grad(padded, dy, width, stride),
                            number=1, repeat=repeat))
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=30)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    work = workload(args.frames)
    py = time_backend(_pykernels, work, args.repeat)
    print(f"utterance of {args.frames} frames ({args.frames * 80} samples), best of {args.repeat}")
    print(f"{'backend':<10} {'forward ms':>11} {'kernel grad ms':>15} {'total ms':>9}")
    print(f"{'python':<10} {py[0] * 1e3:>11.3f} {py[1] * 1e3:>15.3f} {sum(py) * 1e3:>9.3f}")
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return
    c = time_backend(_kernels, work, args.repeat)
    print(f"{'compiled':<10} {c[0] * 1e3:>11.3f} {c[1] * 1e3:>15.3f} {sum(c) * 1e3:>9.3f}")
    padded, kt, bias, dy, width, stride = work
    same = (_kernels.conv1d_frames(padded, kt, bias, stride, dy.shape[0]).tobytes()
            == _pykernels.conv1d_frames(padded, kt, bias, stride, dy.shape[0]).tobytes()
            and _kernels.conv1d_kernel_grad(padded, dy, width, stride).tobytes()
            == _pykernels.conv1d_kernel_grad(padded, dy, width, stride).tobytes())
    print(f"speed-up {sum(py) / sum(c):.1f}x; outputs bit-identical: {same}")


if __name__ == "__main__":
    main()
