import json

import numpy as np
import pytest

from mrunet.model import (
    ModelGraph,
    UnsupportedRankError,
    build_model,
    build_multiresunet,
    build_unet_baseline,
    count_parameters,
    forward,
    load_checkpoint,
    save_checkpoint,
    summarize,
)
from mrunet.tensor import ShapeError

# Width triples (three 3x3 convs plus the 1x1 residual) per block of the
# default configuration, u_base=32, alpha=1.67.
BLOCK_TABLE = {
    "mres1": (8, 17, 26, 51),
    "mres2": (17, 35, 53, 105),
    "mres3": (35, 71, 106, 212),
    "mres4": (71, 142, 213, 426),
    "mres5": (142, 284, 427, 853),
    "mres6": (71, 142, 213, 426),
    "mres7": (35, 71, 106, 212),
    "mres8": (17, 35, 53, 105),
    "mres9": (8, 17, 26, 51),
}
RES_PATH_TABLE = {"respath1": (4, 32), "respath2": (3, 64),
                  "respath3": (2, 128), "respath4": (1, 256)}


def block_filters(model, prefix):
    w1 = model.layer(f"{prefix}.c1.conv").config["filters"]
    w2 = model.layer(f"{prefix}.c2.conv").config["filters"]
    w3 = model.layer(f"{prefix}.c3.conv").config["filters"]
    res = model.layer(f"{prefix}.shortcut").config["filters"]
    return w1, w2, w3, res


@pytest.fixture(scope="module")
def default_model():
    return build_multiresunet(2, (256, 256), 3)


@pytest.fixture(scope="module")
def default_unet():
    return build_unet_baseline(2, (256, 256), 3)


class TestDefaultConformance:
    def test_all_nine_blocks(self, default_model):
        for prefix, expected in BLOCK_TABLE.items():
            assert block_filters(default_model, prefix) == expected, prefix

    def test_res_paths(self, default_model):
        for prefix, (n_blocks, filters) in RES_PATH_TABLE.items():
            convs = [l for l in default_model.layers
                     if l.kind == "conv" and l.name.startswith(prefix + ".")]
            assert len(convs) == 2 * n_blocks, prefix
            assert all(c.config["filters"] == filters for c in convs), prefix

    def test_decoder_concat_channels(self, default_model):
        for level, idx in ((4, 6), (3, 7), (2, 8), (1, 9)):
            u = 32 * 2 ** (level - 1)
            up = default_model.layer(f"up{idx}")
            cat = default_model.layer(f"cat{idx}")
            assert up.out_channels == u
            assert cat.out_channels == u + 32 * 2 ** (level - 1)

    def test_head(self, default_model):
        head = default_model.layer("head")
        assert head.config["kernel_size"] == 1
        assert head.config["filters"] == 1
        assert default_model.output_layer.kind == "sigmoid"


class TestParameterCounts:
    def test_formula_equals_enumeration_2d(self, default_model, default_unet):
        for m in (default_model, default_unet):
            enumerated = sum(node.value.size for _, node in m.trainable_parameters())
            assert count_parameters(m).total == enumerated

    def test_formula_equals_enumeration_3d(self):
        for m in (build_multiresunet(3, (80, 80, 48), 4),
                  build_unet_baseline(3, (80, 80, 48), 4)):
            enumerated = sum(node.value.size for _, node in m.trainable_parameters())
            assert count_parameters(m).total == enumerated

    def test_single_conv_count(self):
        g = ModelGraph(2, (16, 16), 3)
        x = g.add_input()
        g.add_conv(x, 32, 3, name="c")
        assert count_parameters(g).per_layer["c"] == 896

    def test_single_batchnorm_count(self):
        g = ModelGraph(2, (16, 16), 32)
        x = g.add_input()
        g.add_batchnorm(x, name="bn")
        assert count_parameters(g).per_layer["bn"] == 64

    def test_proposed_smaller_than_baseline_2d(self, default_model, default_unet):
        assert count_parameters(default_model).total < count_parameters(default_unet).total

    def test_proposed_smaller_than_baseline_3d(self):
        m = count_parameters(build_multiresunet(3, (80, 80, 48), 4)).total
        u = count_parameters(build_unet_baseline(3, (80, 80, 48), 4)).total
        assert m < u

    def test_report_total_is_sum(self, default_model):
        report = count_parameters(default_model)
        assert report.total == sum(report.per_layer.values())


class TestBaselineTopology:
    def test_counts(self, default_unet):
        kinds = [l.kind for l in default_unet.layers]
        assert kinds.count("maxpool") == 4
        assert kinds.count("conv_transpose") == 4
        assert kinds.count("concat") == 4
        assert kinds.count("batchnorm") == 0

    def test_filters_double_per_level(self, default_unet):
        assert [default_unet.layer(f"enc{i}.conv1").config["filters"]
                for i in (1, 2, 3, 4)] == [32, 64, 128, 256]
        assert default_unet.layer("center.conv1").config["filters"] == 512

    def test_3d_baseline_one_level_shallower(self):
        u3 = build_unet_baseline(3, (80, 80, 48), 4)
        kinds = [l.kind for l in u3.layers]
        assert kinds.count("maxpool") == 3
        assert kinds.count("batchnorm") == 14  # every conv except the head

    def test_3d_doubles_before_pooling(self):
        u3 = build_unet_baseline(3, (80, 80, 48), 4)
        assert u3.layer("enc1.a.conv").config["filters"] == 32
        assert u3.layer("enc1.b.conv").config["filters"] == 64
        assert u3.layer("center.b.conv").config["filters"] == 512


class TestBuildValidation:
    def test_indivisible_extents(self):
        with pytest.raises(ShapeError):
            build_multiresunet(2, (100, 64), 3)
        with pytest.raises(ShapeError):
            build_unet_baseline(2, (64, 72), 3)

    def test_rank_validation(self):
        with pytest.raises(UnsupportedRankError):
            ModelGraph(4, (16, 16, 16, 16), 1)

    def test_unknown_architecture(self):
        with pytest.raises(ValueError):
            build_model("segnet")

    def test_duplicate_layer_name(self):
        g = ModelGraph(2, (16, 16), 1)
        g.add_input()
        with pytest.raises(ValueError):
            g.add_input()


@pytest.fixture(scope="module")
def tiny():
    return build_multiresunet(2, (32, 32), 3, u_base=8, seed=5)


class TestForward:

    def test_zeros_input(self, tiny):
        y = forward(tiny, np.zeros((1, 32, 32, 3), dtype=np.float32), "training")
        assert y.shape == (1, 32, 32, 1)
        assert np.isfinite(y.data).all()
        assert (y.data > 0).all() and (y.data < 1).all()

    def test_output_shape_64(self):
        m = build_multiresunet(2, (64, 64), 3, u_base=8, seed=2)
        y = forward(m, np.zeros((2, 64, 64, 3), dtype=np.float32))
        assert y.shape == (2, 64, 64, 1)

    def test_inference_deterministic(self, tiny):
        x = np.random.default_rng(0).random((2, 32, 32, 3)).astype(np.float32)
        y1 = forward(tiny, x, "inference")
        y2 = forward(tiny, x, "inference")
        assert np.array_equal(y1.data, y2.data)

    def test_rank3_execution_rejected(self):
        m = build_multiresunet(3, (16, 16, 16), 1, u_base=8)
        with pytest.raises(UnsupportedRankError):
            forward(m, np.zeros((1, 16, 16, 16, 1), dtype=np.float32))

    def test_shape_mismatch(self, tiny):
        with pytest.raises(ShapeError):
            forward(tiny, np.zeros((1, 32, 32, 4), dtype=np.float32))

    def test_unet_forward(self):
        m = build_unet_baseline(2, (32, 32), 3, u_base=8, seed=1)
        y = forward(m, np.random.default_rng(4).random((2, 32, 32, 3)).astype(np.float32))
        assert y.shape == (2, 32, 32, 1)
        assert (y.data > 0).all() and (y.data < 1).all()


class TestSummarize:
    def test_schema(self, default_model):
        doc = summarize(default_model)
        json.dumps(doc)  # serializable
        assert doc["architecture"] == "multiresunet"
        assert doc["rank"] == 2
        assert doc["input_shape"] == [256, 256, 3]
        assert doc["total_params"] == count_parameters(default_model).total
        layer = doc["layers"][1]
        assert set(layer) == {"name", "type", "output_channels", "params"}

    def test_3d_constructible_and_summarized(self):
        doc = summarize(build_multiresunet(3, (80, 80, 48), 4))
        assert doc["input_shape"] == [80, 80, 48, 4]
        assert doc["total_params"] > 0


class TestCheckpoint:
    def test_roundtrip_restores_forward(self, tmp_path):
        src = build_multiresunet(2, (32, 32), 3, u_base=8, seed=11)
        x = np.random.default_rng(1).random((1, 32, 32, 3)).astype(np.float32)
        # Push the source model away from init so buffers are nontrivial.
        forward(src, x, "training")
        want = forward(src, x, "inference").data
        path = tmp_path / "model.ckpt"
        save_checkpoint(src, path)

        dst = build_multiresunet(2, (32, 32), 3, u_base=8, seed=99)
        assert not np.array_equal(forward(dst, x, "inference").data, want)
        load_checkpoint(dst, path)
        got = forward(dst, x, "inference").data
        assert np.array_equal(got, want)

    def test_missing_tensor_rejected(self, tmp_path):
        small = build_multiresunet(2, (32, 32), 3, u_base=8, seed=0)
        path = tmp_path / "small.ckpt"
        save_checkpoint(small, path)
        other = build_multiresunet(2, (32, 32), 3, u_base=16, seed=0)
        with pytest.raises((KeyError, ShapeError)):
            load_checkpoint(other, path)
