import math

import numpy as np
import pytest
from scipy.signal import welch

from eegflow.signals import (VIRTUAL_CHANNEL, DatasetError, SignalDataset, SynthConfig, band_power,
                             dataset_from_bytes, dataset_to_bytes, load_csv, load_dataset, pad_virtual_channel,
                             save_csv, save_dataset, split_train_valid, strip_virtual_channel,
                             suppressed_channels, synth_generate, welch_spectrum)


def small_config(**kw) -> SynthConfig:
    base = dict(n_per_class=5, n_channels=3, n_times=256, sample_rate_hz=250.0)
    base.update(kw)
    return SynthConfig(**base)


class TestSynth:
    def test_noise_free_rest_is_pure_sinusoid(self):
        ds = synth_generate(small_config(sigma=0.0, phase_spread=0.0))
        t = np.arange(256) / 250.0
        expected = 10.0 * np.sin(2 * math.pi * 10.0 * t)
        for trial in ds.data[ds.labels == 0]:
            np.testing.assert_allclose(trial, np.tile(expected, (3, 1)), atol=1e-12)

    def test_full_suppression_zeroes_first_half(self):
        ds = synth_generate(small_config(sigma=0.0, rho=0.0))
        hand = ds.data[ds.labels == 1]
        assert np.all(hand[:, suppressed_channels(3)] == 0.0)
        assert np.all(np.abs(hand[:, 2]).max(axis=1) > 9.0)
        assert suppressed_channels(3).tolist() == [0, 1] and suppressed_channels(4).tolist() == [0, 1]

    def test_shape_labels_names(self):
        ds = synth_generate(small_config())
        assert ds.data.shape == (10, 3, 256)
        assert np.bincount(ds.labels).tolist() == [5, 5]
        assert ds.class_names == ["rest", "right_hand"]

    def test_alpha_peak(self):
        ds = synth_generate(SynthConfig(n_per_class=10))
        spec = welch_spectrum(ds.data[ds.labels == 0], ds.sample_rate_hz, segment=250)
        peak = spec.freqs_hz[np.argmax(spec.power.mean(axis=(0, 1)))]
        assert peak == pytest.approx(10.0, abs=1.0)

    def test_deterministic(self):
        a, b = synth_generate(small_config(seed=4)), synth_generate(small_config(seed=4))
        assert dataset_to_bytes(a) == dataset_to_bytes(b)
        assert not np.array_equal(a.data, synth_generate(small_config(seed=5)).data)

    @pytest.mark.parametrize("kw", [dict(n_per_class=0), dict(rho=1.5), dict(sigma=-1.0),
                                    dict(n_times=64)])
    def test_invalid(self, kw):
        with pytest.raises(DatasetError):
            synth_generate(small_config(**kw))


class TestDatasetValidation:
    def test_non_finite(self):
        with pytest.raises(DatasetError, match="NaN"):
            SignalDataset(np.full((1, 1, 4), np.nan), [0], 1.0, ["a"], ["x"])

    def test_label_range(self):
        with pytest.raises(DatasetError, match="labels"):
            SignalDataset(np.zeros((1, 1, 4)), [2], 1.0, ["a"], ["x", "y"])

    def test_wrong_rank(self):
        with pytest.raises(DatasetError, match="shape"):
            SignalDataset(np.zeros((1, 4)), [0], 1.0, ["a"], ["x"])


class TestVirtualChannel:
    def test_pad_odd(self):
        ds = synth_generate(small_config())
        padded = pad_virtual_channel(ds)
        assert padded.data.shape[1] == 4 and padded.channel_names[-1] == VIRTUAL_CHANNEL
        assert np.all(padded.data[:, -1] == 0)
        np.testing.assert_array_equal(strip_virtual_channel(padded).data, ds.data)

    def test_even_untouched(self):
        ds = synth_generate(small_config(n_channels=4))
        assert pad_virtual_channel(ds) is ds and strip_virtual_channel(ds) is ds


class TestSplit:
    def test_default_sizes_and_stratified(self):
        ds = synth_generate(SynthConfig(n_per_class=100, n_times=256))
        train, valid = split_train_valid(ds)
        assert (len(train), len(valid)) == (160, 40)
        assert np.bincount(valid.labels).tolist() == [20, 20]

    def test_disjoint_and_complete(self):
        ds = synth_generate(small_config())
        ds.data[:, 0, 0] = np.arange(len(ds))  # tag trials
        train, valid = split_train_valid(ds, seed=3)
        tags = sorted(train.data[:, 0, 0].tolist() + valid.data[:, 0, 0].tolist())
        assert tags == list(range(len(ds)))

    def test_deterministic(self):
        ds = synth_generate(small_config())
        a, b = split_train_valid(ds, seed=7), split_train_valid(ds, seed=7)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_errors(self):
        ds = synth_generate(small_config())
        with pytest.raises(DatasetError):
            split_train_valid(ds, fraction=1.0)
        with pytest.raises(DatasetError, match="at least 2"):
            split_train_valid(ds.subset([0, 5]))


class TestFiles:
    def test_binary_round_trip(self, tmp_path):
        ds = synth_generate(small_config())
        save_dataset(ds, tmp_path / "d.sgds")
        back = load_dataset(tmp_path / "d.sgds")
        assert back.data.tobytes() == ds.data.tobytes()
        assert back.labels.tolist() == ds.labels.tolist()
        assert (back.channel_names, back.class_names, back.sample_rate_hz) == \
               (ds.channel_names, ds.class_names, ds.sample_rate_hz)

    def test_unicode_names(self):
        ds = SignalDataset(np.ones((1, 1, 2)), [0], 128.0, ["Czé"], ["rést"])
        assert dataset_from_bytes(dataset_to_bytes(ds)).channel_names == ["Czé"]

    def test_truncated(self):
        buf = dataset_to_bytes(synth_generate(small_config()))
        for cut in (3, 10, 40, len(buf) - 1):
            with pytest.raises(DatasetError):
                dataset_from_bytes(buf[:cut])

    def test_bad_magic_version_trailing(self):
        buf = dataset_to_bytes(synth_generate(small_config()))
        with pytest.raises(DatasetError, match="magic"):
            dataset_from_bytes(b"XXXX" + buf[4:])
        with pytest.raises(DatasetError, match="version"):
            dataset_from_bytes(buf[:4] + (9).to_bytes(4, "little") + buf[8:])
        with pytest.raises(DatasetError, match="trailing"):
            dataset_from_bytes(buf + b"\0")

    def test_csv_matches_binary(self, tmp_path):
        ds = synth_generate(small_config())
        save_csv(ds, tmp_path / "d.csv", tmp_path / "l.csv")
        back = load_csv(tmp_path / "d.csv", tmp_path / "l.csv", n_channels=3, sample_rate_hz=250.0,
                        class_names=ds.class_names)
        np.testing.assert_array_equal(back.data, ds.data)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_csv_row_mismatch(self, tmp_path):
        ds = synth_generate(small_config())
        save_csv(ds, tmp_path / "d.csv", tmp_path / "l.csv")
        with pytest.raises(DatasetError, match="rows"):
            load_csv(tmp_path / "d.csv", tmp_path / "l.csv", n_channels=4, sample_rate_hz=250.0)


class TestWelch:
    @pytest.mark.parametrize("segment,overlap", [(250, 0.5), (128, 0.0), (101, 0.25), (64, 0.75)])
    def test_matches_scipy(self, segment, overlap):
        x = np.random.default_rng(segment).normal(size=(2, 3, 512))
        ours = welch_spectrum(x, 250.0, segment=segment, overlap=overlap)
        noverlap = int(round(overlap * segment))
        freqs, ref = welch(x, fs=250.0, window="hann", nperseg=segment, noverlap=noverlap,
                           detrend=False, scaling="density", axis=-1)
        np.testing.assert_allclose(ours.freqs_hz, freqs, atol=1e-12)
        np.testing.assert_allclose(ours.power, ref, rtol=1e-10, atol=1e-15)

    def test_white_noise_flat(self):
        sigma, fs = 2.0, 250.0
        x = np.random.default_rng(0).normal(scale=sigma, size=(2000, 1000))
        spec = welch_spectrum(x, fs)
        inner = spec.power.mean(0)[1:-1]
        np.testing.assert_allclose(inner, 2 * sigma ** 2 / fs, rtol=0.05)

    def test_zero_signal(self):
        spec = welch_spectrum(np.zeros(500), 250.0)
        assert np.all(spec.power == 0)

    def test_parseval(self):
        x = np.random.default_rng(1).normal(size=(50, 2000))
        spec = welch_spectrum(x, 250.0, segment=250)
        total = band_power(spec, 0.0, 125.0).mean()
        assert total == pytest.approx(np.mean(x ** 2), rel=0.05)

    def test_segment_too_long(self):
        with pytest.raises(DatasetError, match="exceeds"):
            welch_spectrum(np.zeros(100), 250.0)
