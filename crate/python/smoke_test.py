"""Smoke test for the czc Python extension.

Build first:  cargo build --release -p czc-py
Then run:     python python/smoke_test.py
"""
import os
import shutil
import sys
import tempfile

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_czc():
    # cargo names the library libczc.so; Python wants czc.so on its path.
    build = tempfile.mkdtemp(prefix="czc_py_")
    for name in ("libczc.so", "libczc.dylib"):
        lib = os.path.join(ROOT, "target", "release", name)
        if os.path.exists(lib):
            shutil.copy(lib, os.path.join(build, "czc.so"))
            break
    else:
        sys.exit("build the extension first: cargo build --release -p czc-py")
    sys.path.insert(0, build)
    import czc

    return czc


def main():
    czc = import_czc()
    rng = np.random.default_rng(0)

    assert czc.summarize([0.8, 0.7, 0.6]) == (0.7, 0.6)
    assert czc.herding_select([[0.0], [1.0], [2.0]], 2)[0] == 1
    assert czc.mask_to_bbox(4, 4, [0] * 16) is None
    mask = np.zeros((6, 6), np.uint8)
    mask[1, 1] = mask[1, 4] = mask[3, 1] = 1
    assert czc.mask_to_bbox(6, 6, mask.ravel().tolist()) == (1, 1, 4, 3)

    a = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    b = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    h, w, out = czc.composite(8, 8, a.tobytes(), b.tobytes(), (2, 2, 5, 5))
    out = np.frombuffer(out, np.uint8).reshape(h, w, 3)
    want = b.copy()
    want[2:6, 2:6] = a[2:6, 2:6]
    assert (out == want).all()
    assert "cam_composite" in czc.compression_modes()

    with tempfile.TemporaryDirectory() as tmp:
        imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(8)]
        codec = czc.Codec.train([(32, 32, i.tobytes()) for i in imgs], epochs=1, batch_size=4)
        stream = codec.encode(32, 32, imgs[0].tobytes())
        info = czc.stream_info(stream)
        assert info["orig_h"] == 32 and info["pad_h"] == 32
        h, w, rec = codec.decode(stream)
        assert (h, w, len(rec)) == (32, 32, 32 * 32 * 3)
        path = os.path.join(tmp, "codec.ckpt")
        codec.save(path)
        assert czc.Codec.load(path).decode(stream) == (h, w, rec)

        cfg = czc.ExperimentConfig(
            "desk_classes = 4\ndesk_train_per_class = 16\ndesk_test_per_class = 4\n"
            "initial_epochs = 1\nincremental_epochs = 1\nlr_decay_epochs = 1\n"
            "codec_epochs = 1\ncodec_finetune_epochs = 1\nbudget_images = 2\n"
        )
        cfg.set("out", os.path.join(tmp, "run"))
        summary = cfg.run()
        assert len(summary.top1) == 2
        assert all(u <= b for u, b in zip(summary.buffer_bits, summary.budget_bits))
        store = czc.ExemplarStore.load(os.path.join(tmp, "run", "store"))
        run_codec = czc.Codec.load(os.path.join(tmp, "run", "codec.ckpt"))
        assert len(store.materialize(run_codec)) == len(store) == summary.exemplar_counts[-1]

    print("python smoke test passed")


if __name__ == "__main__":
    main()
