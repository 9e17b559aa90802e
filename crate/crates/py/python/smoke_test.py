"""Import the compiled `mars` extension and exercise each binding.

Run after `cargo build -p mars-py`; falls back to the cargo build output when
the module is not installed.
"""
import importlib.util
import math
import pathlib
import shutil
import sys
import tempfile


def load():
    try:
        import mars
        return mars
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parents[3]
    for profile in ("release", "debug"):
        for name in ("libmars.so", "libmars.dylib", "mars.dll"):
            lib = root / "target" / profile / name
            if lib.exists():
                tmp = pathlib.Path(tempfile.mkdtemp()) / ("mars.pyd" if name.endswith("dll") else "mars.so")
                shutil.copy(lib, tmp)
                spec = importlib.util.spec_from_file_location("mars", tmp)
                module = importlib.util.module_from_spec(spec)
                spec.loader.exec_module(module)
                return module
    sys.exit("mars extension not found; run `cargo build -p mars-py` first")


def main():
    mars = load()
    sr = 16000
    samples = [0.5 * math.sin(2 * math.pi * 440 * i / sr) for i in range(4096)]
    spec = mars.spectrogram(samples, sr, n_fft=256, hop=64)
    assert len(spec) == 128 and len(spec[0]) == 64
    audio = mars.griffin_lim(spec, sr, n_fft=256, hop=64, iters=8, seed=1)
    assert len(audio) == 4096

    values = [float(i) for i in range(2 * 4 * 8)]
    packed, shape = mars.pack(values, (2, 4, 8), 2, 2)
    assert shape == (8, 2, 4)
    assert mars.unpack(packed, (2, 4, 8), 2, 2) == values

    rows = [[math.sin(i * 0.3 + j) for j in range(4)] for i in range(40)]
    assert mars.fad(rows, rows) == 0.0
    assert mars.kid(rows, rows) == 0.0
    assert mars.ndb(rows, rows, k=4) == (0, 0.0)
    assert len(mars.config_hash("seed = 3\n")) == 64

    try:
        mars.pack(values, (2, 4, 8), 3, 1)
    except mars.MarsError as e:
        assert str(e).split(":")[0] in ("config", "invalid-input")
    else:
        raise AssertionError("bad factor accepted")
    print("mars smoke test ok")


if __name__ == "__main__":
    main()
