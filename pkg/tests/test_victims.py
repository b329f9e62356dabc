import pytest
import torch

from gapxx.errors import (
    CheckpointError,
    CheckpointTypeError,
    ConfigurationError,
    InvalidInputError,
    TrainingFailureError,
)
from gapxx.victims import (
    VictimArch,
    VictimSpec,
    build_victim,
    evaluate_accuracy,
    first_argmax,
    first_argmin,
    load_victim,
    save_victim,
    train_victim,
)


@pytest.fixture(scope="module")
def lenet_mnist():
    torch.manual_seed(0)
    return build_victim(VictimSpec(VictimArch.LENET, "mnist")).freeze()


class TestBuildVictim:
    @pytest.mark.parametrize("arch,dataset", [
        (VictimArch.MLP3, "mnist"),
        (VictimArch.LENET, "mnist"),
        (VictimArch.RESNET18, "mnist"),
        (VictimArch.SENET18, "cifar10"),
        (VictimArch.RESNET18, "cifar10"),
        (VictimArch.VGG11, "cifar10"),
    ])
    def test_valid_pairings_emit_10_logits(self, arch, dataset):
        torch.manual_seed(0)
        victim = build_victim(VictimSpec(arch, dataset))
        out = victim.predict(torch.rand(2, 3, 32, 32))
        assert out.logits.shape == (2, 10)
        assert out.probabilities.sum(dim=1).allclose(torch.ones(2), atol=1e-6)
        assert torch.equal(out.predicted_class, out.logits.argmax(dim=1))

    @pytest.mark.parametrize("arch,dataset", [
        (VictimArch.LENET, "cifar10"),
        (VictimArch.MLP3, "cifar10"),
        (VictimArch.SENET18, "mnist"),
        (VictimArch.VGG11, "mnist"),
    ])
    def test_invalid_pairing_rejected(self, arch, dataset):
        with pytest.raises(ConfigurationError):
            VictimSpec(arch, dataset)

    def test_unknown_dataset_rejected(self):
        with pytest.raises(ConfigurationError):
            VictimSpec(VictimArch.LENET, "svhn")

    def test_metadata_records_parameters_and_layers(self, lenet_mnist):
        assert lenet_mnist.metadata["parameter_count"] == sum(
            p.numel() for p in lenet_mnist.parameters())
        assert lenet_mnist.metadata["layer_sequence"]


class TestPredict:
    def test_duplicate_rows_identical_outputs(self, lenet_mnist):
        torch.manual_seed(1)
        x = torch.rand(1, 3, 32, 32).repeat(4, 1, 1, 1)
        logits = lenet_mnist.predict(x).logits
        assert torch.equal(logits[0], logits[1])
        assert torch.equal(logits[0], logits[3])

    def test_empty_batch(self, lenet_mnist):
        out = lenet_mnist.predict(torch.empty(0, 3, 32, 32))
        assert out.logits.shape == (0, 10)
        assert out.predicted_class.shape == (0,)

    def test_bit_identical_across_calls(self, lenet_mnist):
        torch.manual_seed(2)
        x = torch.rand(3, 3, 32, 32)
        assert torch.equal(lenet_mnist.predict(x).logits, lenet_mnist.predict(x).logits)

    def test_shape_mismatch_rejected(self, lenet_mnist):
        with pytest.raises(InvalidInputError):
            lenet_mnist.predict(torch.rand(2, 1, 28, 28))

    def test_argmax_shift_invariant(self, lenet_mnist):
        torch.manual_seed(3)
        x = torch.rand(8, 3, 32, 32)
        logits = lenet_mnist.predict(x).logits
        shifted = logits + 123.45
        assert torch.equal(first_argmax(logits, 1), first_argmax(shifted, 1))
        assert torch.equal(first_argmin(logits, 1), first_argmin(shifted, 1))


class TestLeastLikely:
    def test_argmin_example(self, lenet_mnist):
        logits = torch.tensor([2.0, -1.0, 0.5])
        assert first_argmin(logits).item() == 1

    def test_all_equal_ties_to_zero(self):
        assert first_argmin(torch.zeros(10)).item() == 0
        assert first_argmax(torch.zeros(10)).item() == 0

    def test_never_equals_argmax_for_nonconstant_logits(self):
        # brute-force oracle over random logit matrices
        torch.manual_seed(4)
        logits = torch.randn(500, 10)
        nonconstant = logits.amax(1) != logits.amin(1)
        amax, amin = first_argmax(logits, 1), first_argmin(logits, 1)
        assert (amax[nonconstant] != amin[nonconstant]).all()

    def test_computed_on_clean_input(self, lenet_mnist):
        torch.manual_seed(5)
        x = torch.rand(4, 3, 32, 32)
        ll = lenet_mnist.least_likely_class(x)
        expected = first_argmin(lenet_mnist.predict(x).logits, 1)
        assert torch.equal(ll, expected)


class TestChecksumAndCheckpoint:
    def test_checksum_stable_and_sensitive(self, lenet_mnist):
        c1 = lenet_mnist.parameter_checksum()
        assert c1 == lenet_mnist.parameter_checksum()
        torch.manual_seed(6)
        other = build_victim(VictimSpec(VictimArch.LENET, "mnist"))
        assert other.parameter_checksum() != c1

    def test_round_trip_bit_identical(self, lenet_mnist, tmp_path):
        path = tmp_path / "victim.pt"
        save_victim(lenet_mnist, path)
        loaded = load_victim(path)
        torch.manual_seed(7)
        x = torch.rand(3, 3, 32, 32)
        assert torch.equal(loaded.predict(x).logits, lenet_mnist.predict(x).logits)
        assert loaded.parameter_checksum() == lenet_mnist.parameter_checksum()
        assert loaded.spec == lenet_mnist.spec

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_victim(tmp_path / "nope.pt")

    def test_corrupt_file(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_victim(bad)

    def test_generator_checkpoint_rejected_by_type_tag(self, tmp_path):
        from gapxx.generator import GeneratorConfig, PerturbationGenerator, save_generator

        gen = PerturbationGenerator(GeneratorConfig(base_channels=4, residual_blocks=1))
        gpath = tmp_path / "gen.pt"
        save_generator(gen, gpath)
        with pytest.raises(CheckpointTypeError):
            load_victim(gpath)


class TestTrainVictim:
    def test_short_run_learns_separable_toy_data(self):
        torch.manual_seed(8)
        n = 512
        labels = torch.randint(0, 10, (n,))
        images = torch.zeros(n, 3, 32, 32)
        for i in range(n):  # class-coded blocks: trivially separable
            images[i, :, : 3 + labels[i], :] = 1.0
        victim = build_victim(VictimSpec(VictimArch.MLP3, "mnist"))
        victim, av = train_victim(victim, images, labels, images, labels,
                                  epochs=10, batch_size=64, lr=0.05, seed=0)
        assert av > 80.0
        assert victim.metadata["av_percent"] == av
        assert not any(p.requires_grad for p in victim.parameters())

    def test_divergence_raises_training_failure(self):
        torch.manual_seed(9)
        images, labels = torch.rand(64, 3, 32, 32), torch.randint(0, 10, (64,))
        victim = build_victim(VictimSpec(VictimArch.MLP3, "mnist"))
        with torch.no_grad():  # poison the weights so the first loss is non-finite
            victim.net.fc1.weight.fill_(1e38)
        with pytest.raises(TrainingFailureError):
            train_victim(victim, images, labels, images, labels, epochs=1, seed=0)

    def test_recorded_av_matches_reevaluation(self):
        torch.manual_seed(10)
        images, labels = torch.rand(128, 3, 32, 32), torch.randint(0, 10, (128,))
        victim = build_victim(VictimSpec(VictimArch.LENET, "mnist"))
        victim, av = train_victim(victim, images, labels, images, labels, epochs=1, seed=0)
        assert evaluate_accuracy(victim, images, labels) == pytest.approx(av)
