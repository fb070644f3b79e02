"""Smoke test for the `droplet` extension module.

Build and install first:
    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml
then run:
    python python/smoke_test.py
"""

import json
import math

import droplet


def main():
    image, truths = droplet.render_scene(320, 240, 12, 3.0, 10.0, seed=7)
    assert image.shape == (240, 320)
    noisy = droplet.add_noise(image, seed=8)

    params = droplet.DetectionParams(min_sigma=1.5, max_sigma=8.0, n_bin=13)
    assert len(params.sigmas()) == 14

    detector = droplet.Detector(params)
    result = detector.detect(noisy)
    report = droplet.match_voc(result.blobs, truths, 0.5)
    print(f"{len(result)} blobs, precision {report['precision']:.3f}, recall {report['recall']:.3f}")
    assert report["precision"] >= 0.8 and report["recall"] >= 0.8

    # a second frame of the same shape reuses the cached plan
    detector.detect(image)
    assert detector.plan_builds == 1

    for blob in result.blobs:
        assert math.isclose(blob.radius, math.sqrt(2) * blob.sigma)
    assert sum(result.histogram["count"]) == len(result)
    assert set(result.timings) >= {"preprocess_ms", "convolve_ms", "extrema_ms", "prune_ms"}

    doc = json.loads(result.to_json("frame.png"))
    assert doc["image"] == "frame.png" and len(doc["blobs"]) == len(result)

    again = droplet.Image.decode(noisy.to_raw())
    assert again.to_list() == noisy.to_list()

    try:
        droplet.DetectionParams(min_sigma=3.0, max_sigma=3.0)
    except ValueError as err:
        print(f"rejected equal-sigma ladder: {err}")
    else:
        raise AssertionError("equal-sigma ladder accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
