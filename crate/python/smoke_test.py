"""Smoke test for the cctshp extension module.

Build and install first:  pip install -e crates/python --no-build-isolation
"""

import math
import tempfile

import cctshp


def main():
    latencies = {name: cctshp.ArchitectureSpec.preset(name).layer_latency()
                 for name in ("cct-7/3x1", "cct-2/3x5", "cct-2/3x2", "cct-1/3x1", "cct-1/3x2")}
    assert list(latencies.values()) == [30, 14, 11, 6, 7], latencies

    assert math.isclose(cctshp.noise_per_element(4, 12.5, 100), 0.005)
    assert math.isclose(cctshp.uncorrelated_baseline(0.81), 0.6922)
    assert cctshp.signal_to_noise(1.0, 0.0, 0.0) == math.inf

    eye = [[1.0 if i == j else 0.0 for j in range(5)] for i in range(5)]
    report = cctshp.extract_clusters(eye, 0.3)
    assert len(report["clusters"]) == 5 and report["noise"] == 0

    with tempfile.TemporaryDirectory() as tmp:
        cctshp.write_synthetic(tmp, variant="cifar10", train_per_label=10, val_per_label=4)
        prep = lambda ds: ds.downscale(2).normalized()
        train = prep(cctshp.Dataset.load(tmp, "cifar10", "train"))
        val = prep(cctshp.Dataset.load(tmp, "cifar10", "validation"))
        assert len(train) == 100 and train.size == 16

        model = cctshp.Model(cctshp.ArchitectureSpec.preset("cct-1/3x1-tiny"), seed=1)
        losses = model.fit(train, val, epochs=6, batch_size=16, lr=2e-3, augment=False, strict=True)
        assert losses[-1] < losses[0], losses
        print(f"trained: loss {losses[0]:.3f} -> {losses[-1]:.3f}, val acc {model.accuracy(val):.3f}")

        path = f"{tmp}/model.bin"
        model.save(path)
        assert cctshp.Model.load(path).fingerprint() == model.fingerprint()

        probe = cctshp.BlockProbe(model, 1, train, val, epochs=5, lr=3e-3, batch_size=16, fc_bias=False)
        heads = probe.head_fields()
        whole = probe.whole_fields()
        assert len(heads) == probe.heads()[0]
        for i in range(10):
            for j in range(10):
                total = sum(h["raw"][i][j] for h in heads)
                assert abs(total - whole["raw"][i][j]) < 1e-6
        assert max(max(r) for r in heads[0]["values"]) == 1.0
        stats = cctshp.block_statistics([h["values"] for h in heads], 0.3, probe.accuracy, 1)
        print(f"probe accuracy {probe.accuracy:.3f}, clusters per head {stats['n_c']:.2f}, SNR {stats['snr']:.3g}")

        fields = model.predict(val)
        decided = cctshp.committee_decide([fields, fields])
        assert decided == cctshp.committee_decide([fields])
        assert cctshp.agreement(fields, fields, val.labels) == 1.0

    try:
        cctshp.ArchitectureSpec.preset("no-such-arch")
    except cctshp.CctShpError:
        pass
    else:
        raise AssertionError("unknown preset accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
