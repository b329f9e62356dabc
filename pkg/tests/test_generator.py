import pytest
import torch

from gapxx.errors import CheckpointError, CheckpointTypeError, InvalidInputError
from gapxx.generator import (
    GeneratorConfig,
    PerturbationGenerator,
    encode_condition,
    encode_condition_batch,
    inject_condition,
    load_generator,
    save_generator,
)


@pytest.fixture(scope="module")
def small_gen():
    torch.manual_seed(0)
    return PerturbationGenerator(GeneratorConfig(base_channels=8, residual_blocks=2))


class TestEncodeCondition:
    def test_one_hot(self):
        vec = encode_condition(3, 10)
        assert vec.tolist() == [0, 0, 0, 1, 0, 0, 0, 0, 0, 0]

    def test_absent_label_gives_zero_vector(self):
        assert encode_condition(None, 10).tolist() == [0.0] * 10

    def test_out_of_range_label(self):
        with pytest.raises(InvalidInputError):
            encode_condition(10, 10)
        with pytest.raises(InvalidInputError):
            encode_condition(-1, 10)

    def test_batch_helper(self):
        batch = encode_condition_batch([1, 0], 4)
        assert batch.tolist() == [[0, 1, 0, 0], [1, 0, 0, 0]]
        zeros = encode_condition_batch(None, 4, batch_size=3)
        assert zeros.shape == (3, 4) and zeros.abs().sum() == 0


class TestInjectCondition:
    def test_concatenation_arithmetic(self):
        feats = torch.randn(2, 128, 8, 8)
        cond = encode_condition_batch([3, 5], 10)
        out = inject_condition(feats, cond)
        assert out.shape == (2, 138, 8, 8)

    def test_zero_condition_neutral(self):
        torch.manual_seed(1)
        feats = torch.randn(2, 16, 4, 4)
        out = inject_condition(feats, torch.zeros(2, 10))
        assert torch.equal(out[:, :16], feats)
        assert out[:, 16:].abs().sum() == 0

    def test_one_hot_broadcast_planes(self):
        feats = torch.zeros(1, 4, 3, 3)
        out = inject_condition(feats, encode_condition(3, 10).unsqueeze(0))
        planes = out[0, 4:]
        assert torch.equal(planes[3], torch.ones(3, 3))
        assert planes.sum() == 9.0  # exactly one plane of ones

    def test_batch_mismatch(self):
        with pytest.raises(InvalidInputError):
            inject_condition(torch.zeros(2, 4, 2, 2), torch.zeros(3, 10))


class TestForward:
    def test_output_shape_and_bounds(self, small_gen):
        torch.manual_seed(2)
        x = torch.rand(4, 3, 32, 32)
        cond = encode_condition_batch([0, 1, 2, 3], 10)
        delta = small_gen(x, cond)
        assert delta.shape == x.shape
        assert delta.min() >= -1.0 and delta.max() <= 1.0

    def test_batch_size_mismatch_rejected(self, small_gen):
        with pytest.raises(InvalidInputError):
            small_gen(torch.rand(4, 3, 32, 32), encode_condition_batch([0, 1], 10))

    def test_missing_condition_rejected(self, small_gen):
        with pytest.raises(InvalidInputError):
            small_gen(torch.rand(2, 3, 32, 32))

    def test_deterministic_in_eval_mode(self, small_gen):
        small_gen.eval()
        torch.manual_seed(3)
        x = torch.rand(2, 3, 32, 32)
        cond = encode_condition_batch([4, 7], 10)
        assert torch.equal(small_gen(x, cond), small_gen(x, cond))

    def test_conditions_change_output(self, small_gen):
        small_gen.eval()
        torch.manual_seed(4)
        x = torch.rand(2, 3, 32, 32)
        d1 = small_gen(x, encode_condition_batch([1, 1], 10))
        d2 = small_gen(x, encode_condition_batch([2, 2], 10))
        assert (d1 - d2).abs().max() > 0

    def test_unconditioned_variant(self):
        torch.manual_seed(5)
        gen = PerturbationGenerator(GeneratorConfig(condition_dim=0, base_channels=8,
                                                    residual_blocks=1))
        delta = gen(torch.rand(2, 3, 32, 32))
        assert delta.shape == (2, 3, 32, 32)

    def test_wrong_input_shape(self, small_gen):
        with pytest.raises(InvalidInputError):
            small_gen(torch.rand(2, 3, 16, 16), encode_condition_batch([0, 0], 10))


class TestGradientFlow:
    def test_backprop_matches_finite_differences(self):
        torch.manual_seed(6)
        gen = PerturbationGenerator(GeneratorConfig(base_channels=4, residual_blocks=1)).double()
        x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
        cond = encode_condition_batch([2], 10).double()
        gen.eval()

        def scalar():
            return (gen(x, cond) ** 2).sum()

        scalar().backward()
        params = [p for p in gen.parameters() if p.grad is not None and p.grad.abs().sum() > 0]
        assert params, "no gradients reached the generator parameters"
        torch.manual_seed(7)
        checked = 0
        for p in params[:6]:
            flat = p.detach().reshape(-1)
            grad = p.grad.reshape(-1)
            for idx in torch.randint(0, flat.numel(), (3,)):
                h = 1e-6
                with torch.no_grad():
                    orig = flat[idx].item()
                    flat[idx] = orig + h
                    up = scalar().item()
                    flat[idx] = orig - h
                    down = scalar().item()
                    flat[idx] = orig
                fd = (up - down) / (2 * h)
                bp = grad[idx].item()
                # below ~1e-5 the central difference is dominated by roundoff
                if max(abs(fd), abs(bp)) > 1e-5:
                    assert abs(fd - bp) / max(abs(fd), abs(bp)) < 1e-3
                    checked += 1
        assert checked > 5


class TestCheckpoint:
    def test_round_trip_bit_identical(self, small_gen, tmp_path):
        path = tmp_path / "gen.pt"
        small_gen.metadata["norm_family"] = "linf"
        save_generator(small_gen, path)
        loaded = load_generator(path)
        torch.manual_seed(8)
        x = torch.rand(2, 3, 32, 32)
        cond = encode_condition_batch([0, 9], 10)
        small_gen.eval()
        assert torch.equal(loaded(x, cond), small_gen(x, cond))
        assert loaded.metadata["norm_family"] == "linf"

    def test_victim_checkpoint_rejected(self, tmp_path):
        from gapxx.victims import VictimArch, VictimSpec, build_victim, save_victim

        victim = build_victim(VictimSpec(VictimArch.LENET, "mnist"))
        vpath = tmp_path / "victim.pt"
        save_victim(victim, vpath)
        with pytest.raises(CheckpointTypeError):
            load_generator(vpath)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_generator(tmp_path / "absent.pt")

    def test_corrupt_file(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_generator(bad)
