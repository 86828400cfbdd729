"""Quick end-to-end check of the Python bindings.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import math
import os
import tempfile

import ctpseg


def main():
    q = [0, 0, 1, 3, 6, 10, 15, 16, 16, 15, 14, 13, 12, 11, 10]
    win = ctpseg.detect_window([float(v) for v in q], k=3)
    assert (win["t_start"], win["t_end"]) == (2, 14), win

    w = ctpseg.weight_map([1.0] + [0.0] * 60, (1, 61))
    assert w[0] == 1.5 and abs(w[50] - (0.5 + 1 / (1 + math.e))) < 1e-9

    cfg = ctpseg.TrainConfig()
    assert cfg.get("batch_size") == "5" and abs(cfg.lr_at(181) - 0.0004) < 1e-12
    cfg = ctpseg.TrainConfig(
        epochs=2, lr_decay_epoch=1, batch_size=2, crop_size="32x32", base_ch=4, depth=2
    )
    assert ctpseg.TrainConfig.from_text(cfg.to_text()).to_text() == cfg.to_text()
    try:
        ctpseg.TrainConfig(lr="fast")
    except ValueError:
        pass
    else:
        raise AssertionError("bad value accepted")

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        split = ctpseg.generate_phantoms(
            data, 4, seed=3, dims=(2, 24, 24), time_points=20, lesion_radius=(3.0, 5.0)
        )
        out = os.path.join(tmp, "model")
        res = ctpseg.train(cfg, data, out)
        assert res["steps"] > 0 and math.isfinite(res["final_loss"])

        model = ctpseg.Model.load(os.path.join(out, "best"))
        case = os.path.join(data, split["test"][0])
        pred = model.predict(case)
        assert tuple(pred["shape"]) == (2, 24, 24)
        assert set(pred["seg"]) <= {0.0, 1.0}
        assert len(pred["pseudo_dwi"]) == 2 * 24 * 24

        gt = [0.0] * (2 * 24 * 24)
        gt[300] = 1.0
        m = ctpseg.evaluate(gt, gt, (2, 24, 24), spacing=(5.0, 1.5, 1.5))
        assert m["dice"] == 1.0 and m["hd_mm"] == 0.0

    print(f"ctpseg {ctpseg.__version__}: python smoke test passed ({model.variant}, epoch {model.epoch})")


if __name__ == "__main__":
    main()
