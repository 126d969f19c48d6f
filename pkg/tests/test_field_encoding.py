"""Input encodings, normalization stats, and the binary dataset format."""

import numpy as np
import pytest

from pcno.container import (
    ContainerChecksumError,
    ContainerFormatError,
    ContainerVersionError,
    read_container,
    write_container,
)
from pcno.field_encoding import (
    Sample,
    channel_layout,
    encode_inputs,
    fit_norm_stats,
    read_dataset,
    write_dataset,
)
from pcno.gas_network import build_paper_network, sample_paper_schedule
from pcno.transient_solver import GridSpec, restrict_field, simulate


@pytest.fixture(scope="module")
def paper_case():
    net, sched = sample_paper_schedule(seed=3)
    return net, sched


class TestEncodeInputs:
    def test_paper_shapes(self, paper_case):
        net, sched = paper_case
        enc = encode_inputs(net, sched, GridSpec(dt=640.0, dx=400.0))
        assert enc.layout.d_a == 7
        assert [r.shape for r in enc.regions] == [(7, 136, 151), (7, 136, 126),
                                                  (7, 136, 101)]

    def test_region_bits(self, paper_case):
        net, sched = paper_case
        enc = encode_inputs(net, sched, GridSpec(dt=2700.0, dx=2000.0))
        # zero-based region index, MSB first: region 3 -> (1, 0)
        assert np.all(enc.regions[2][0] == 1.0) and np.all(enc.regions[2][1] == 0.0)
        assert np.all(enc.regions[0][0] == 0.0) and np.all(enc.regions[0][1] == 0.0)
        assert np.all(enc.regions[1][0] == 0.0) and np.all(enc.regions[1][1] == 1.0)

    def test_coordinates_are_physical(self, paper_case):
        net, sched = paper_case
        grid = GridSpec(dt=2700.0, dx=2000.0)
        enc = encode_inputs(net, sched, grid)
        layout = enc.layout
        r0 = enc.regions[0]
        assert np.array_equal(r0[layout.x_channel][0], np.arange(31) * 2000.0)
        assert np.array_equal(r0[layout.t_channel][:, 0], np.arange(33) * 2700.0)

    def test_source_pressure_channel_constant(self, paper_case):
        net, sched = paper_case
        enc = encode_inputs(net, sched, GridSpec(dt=640.0, dx=400.0))
        c = enc.layout.source_channel(0)
        for r in enc.regions:
            assert np.all(r[c] == 0.3e6)

    def test_boundary_channels_identical_across_regions(self, paper_case):
        net, sched = paper_case
        enc = encode_inputs(net, sched, GridSpec(dt=640.0, dx=400.0))
        layout = enc.layout
        bchans = [layout.demand_channel(n) for n in layout.demand_nodes]
        bchans += [layout.source_channel(n) for n in layout.source_nodes]
        for c in bchans:
            base = enc.regions[0][c][:, 0]
            for r in enc.regions:
                # constant along x, equal across regions
                assert np.all(r[c] == r[c][:, :1])
                assert np.array_equal(r[c][:, 0], base)

    def test_demand_channel_tracks_schedule(self, paper_case):
        net, sched = paper_case
        grid = GridSpec(dt=640.0, dx=400.0)
        enc = encode_inputs(net, sched, grid)
        times = grid.time_points(sched.horizon)
        expected = sched.flow_series(2, times)
        c = enc.layout.demand_channel(2)
        assert np.array_equal(enc.regions[1][c][:, 0], expected)

    def test_resolution_consistent(self, paper_case):
        # Encoding then coarsening equals encoding at the coarse grid.
        net, sched = paper_case
        fine = encode_inputs(net, sched, GridSpec(dt=320.0, dx=200.0))
        coarse = encode_inputs(net, sched, GridSpec(dt=640.0, dx=400.0))
        for rf, rc in zip(fine.regions, coarse.regions):
            assert np.array_equal(rf[:, ::2, ::2], rc)

    def test_d_a_formula(self):
        net, sched = build_paper_network()
        layout = channel_layout(net)
        assert layout.d_a == layout.n_region_bits + 2 \
            + len(layout.demand_nodes) + len(layout.source_nodes)
        assert layout.n_region_bits == 2


def make_samples(n=2, dt=2700.0, dx=2000.0, with_target=True):
    samples = []
    for seed in range(n):
        net, sched = sample_paper_schedule(seed=seed)
        grid = GridSpec(dt=dt, dx=dx)
        enc = encode_inputs(net, sched, grid)
        target = simulate(net, sched, grid) if with_target else None
        samples.append(Sample(encoding=enc, target=target, dt=dt, dx=dx, seed=seed))
    return net, samples


class TestNormStats:
    def test_round_trip_identity(self):
        net, samples = make_samples(2)
        stats = fit_norm_stats(samples)
        enc = samples[0].encoding
        back = stats.denormalize_encoding(stats.normalize_encoding(enc))
        for a, b in zip(back.regions, enc.regions):
            assert np.allclose(a, b, rtol=1e-12, atol=1e-9)
        rng = np.random.default_rng(0)
        m = rng.normal(1.2, 0.4, (5, 7))
        assert np.allclose(stats.denormalize_flow(stats.normalize_flow(m)), m,
                           rtol=1e-12)
        p = rng.normal(2.9e5, 1e4, (5, 7))
        assert np.allclose(stats.denormalize_pressure(stats.normalize_pressure(p)), p,
                           rtol=1e-12)

    def test_constant_channel_falls_back_to_unit_std(self):
        net, samples = make_samples(2)
        stats = fit_norm_stats(samples)
        layout = samples[0].encoding.layout
        c = layout.source_channel(0)   # pressure fixed at 0.3 MPa
        assert stats.input_std[c] == 1.0
        assert stats.input_mean[c] == pytest.approx(0.3e6)
        normed = stats.normalize_encoding(samples[0].encoding)
        assert np.allclose(normed.regions[0][c], 0.0)

    def test_coordinate_channels_rescaled_to_unit(self):
        net, samples = make_samples(1)
        stats = fit_norm_stats(samples)
        normed = stats.normalize_encoding(samples[0].encoding)
        layout = samples[0].encoding.layout
        for c in layout.coord_channels:
            vals = np.concatenate([r[c].ravel() for r in normed.regions])
            assert vals.min() == 0.0
            assert vals.max() == pytest.approx(1.0)

    def test_pressure_mean_in_plausible_band(self):
        net, samples = make_samples(3)
        stats = fit_norm_stats(samples)
        assert 0.25e6 <= stats.output_mean[1] <= 0.31e6

    def test_requires_a_target(self):
        net, samples = make_samples(1, with_target=False)
        with pytest.raises(ValueError):
            fit_norm_stats(samples)


class TestDatasetIO:
    def test_round_trip_bit_identical(self, tmp_path):
        net, samples = make_samples(2)
        path = tmp_path / "data.pcno"
        write_dataset(path, {"note": "test"}, samples, network=net)
        manifest, loaded = read_dataset(path)
        assert manifest["note"] == "test"
        assert manifest["n_samples"] == 2
        for a, b in zip(loaded, samples):
            assert a.seed == b.seed
            for ra, rb in zip(a.encoding.regions, b.encoding.regions):
                assert np.array_equal(ra, rb)
            for e in range(3):
                assert np.array_equal(a.target.M[e], b.target.M[e])
                assert np.array_equal(a.target.P[e], b.target.P[e])

    def test_pde_only_samples_round_trip(self, tmp_path):
        net, samples = make_samples(2, with_target=False)
        path = tmp_path / "pde.pcno"
        write_dataset(path, {}, samples, network=net)
        _, loaded = read_dataset(path)
        assert all(s.target is None for s in loaded)

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_dataset(tmp_path / "x.pcno", {}, [])

    def test_corrupted_magic(self, tmp_path):
        net, samples = make_samples(1)
        path = tmp_path / "data.pcno"
        write_dataset(path, {}, samples, network=net)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(ContainerFormatError):
            read_dataset(path)

    def test_truncated_file(self, tmp_path):
        net, samples = make_samples(1)
        path = tmp_path / "data.pcno"
        write_dataset(path, {}, samples, network=net)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ContainerFormatError):
            read_dataset(path)

    def test_payload_corruption_detected(self, tmp_path):
        net, samples = make_samples(1)
        path = tmp_path / "data.pcno"
        write_dataset(path, {}, samples, network=net)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises((ContainerChecksumError, ContainerFormatError)):
            read_dataset(path)

    def test_unknown_version(self, tmp_path):
        net, samples = make_samples(1)
        path = tmp_path / "data.pcno"
        write_dataset(path, {}, samples, network=net)
        blob = bytearray(path.read_bytes())
        blob[4:6] = (99).to_bytes(2, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(ContainerVersionError):
            read_dataset(path)

    def test_file_size_close_to_payload_arithmetic(self, tmp_path):
        net, samples = make_samples(2, dt=640.0, dx=400.0)
        path = tmp_path / "data.pcno"
        write_dataset(path, {}, samples, network=net)
        expected_payload = 2 * sum((7 + 2) * 136 * d_x * 8
                                   for d_x in (151, 126, 101))
        actual = path.stat().st_size
        assert expected_payload < actual < expected_payload * 1.02 + 65536


class TestContainerPrimitives:
    def test_round_trip_with_complex(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {
            "a": rng.standard_normal((3, 4)),
            "b": rng.standard_normal(5) + 1j * rng.standard_normal(5),
        }
        path = tmp_path / "c.pcno"
        write_container(path, {"k": [1, 2]}, tensors)
        manifest, back = read_container(path)
        assert manifest == {"k": [1, 2]}
        assert np.array_equal(back["a"], tensors["a"])
        assert np.array_equal(back["b"], tensors["b"])
        assert back["b"].dtype == np.complex128

    def test_atomic_write_leaves_no_temp_on_error(self, tmp_path):
        with pytest.raises(ValueError):
            write_container(tmp_path / "d.pcno", {}, {"bad": np.zeros(3, dtype=np.int32)})
        leftovers = [p for p in tmp_path.iterdir()]
        assert leftovers == []
