import math
import random

import pytest
from scipy import stats as scipy_stats

from bletrack.addressing import AddressKind, MacAddress
from bletrack.codec import Handoff, InstantHotspot, Nearby, WifiSettings
from bletrack.fingerprint import DeviceClass, OsFamily, OsFingerprint, OsMajor
from bletrack.tracker import (
    BinKey,
    DegenerateFit,
    LinkOutcome,
    Observation,
    OutOfOrderTimestamp,
    VerdictKind,
    build_ssid_index,
    collision_probability,
    detect_global_mac_leak,
    fit_trajectory,
    icloud_cluster,
    ingest,
    link_rotation,
    lookup_ssid,
    prediction_window,
    reidentify,
    ssid_hash3,
    unwrap_sequence,
    window_from_width,
)

IOS12 = OsFingerprint(OsFamily.IOS, OsMajor.IOS12, ("test",))


def obs(ts, addr, seq=None, payload=b"", status=None, icloud=None, hotspot=False,
        cls=DeviceClass.MOBILE_IOS, os=IOS12, model=None,
        kind=AddressKind.RESOLVABLE_PRIVATE):
    messages = []
    if seq is not None:
        messages.append(Handoff(0x00, seq, payload))
    if status is not None:
        messages.append(Nearby(0, 11, status))
    if icloud is not None:
        messages.append(WifiSettings(icloud))
    if hotspot:
        messages.append(InstantHotspot(b"\x01\x01", 50, 0, 7, 4))
    return Observation(timestamp=ts, address=MacAddress.parse(addr),
                       address_kind=kind, messages=tuple(messages),
                       device_class=cls, os=os, model=model)


class TestIngest:
    def test_repeated_frames_one_track_deduped(self):
        stream = [obs(0.0, "7B:00:00:00:00:01", seq=500, payload=b"xx"),
                  obs(1.0, "7B:00:00:00:00:01", seq=500, payload=b"xx"),
                  obs(2.0, "7B:00:00:00:00:01", seq=500, payload=b"xx")]
        result = ingest(stream)
        assert len(result.tracks) == 1
        assert result.tracks[0].seq_samples == [(0.0, 500)]

    def test_two_concurrent_addresses_two_tracks(self):
        stream = [obs(0.0, "7B:00:00:00:00:01", seq=10),
                  obs(0.1, "7B:00:00:00:00:02", seq=900)]
        assert len(ingest(stream).tracks) == 2

    def test_changed_seq_recorded(self):
        stream = [obs(0.0, "7B:00:00:00:00:01", seq=10),
                  obs(1.0, "7B:00:00:00:00:01", seq=11)]
        assert ingest(stream).tracks[0].seq_samples == [(0.0, 10), (1.0, 11)]

    def test_strict_mode_rejects_time_regression(self):
        stream = [obs(5.0, "7B:00:00:00:00:01", seq=1),
                  obs(4.0, "7B:00:00:00:00:02", seq=2)]
        with pytest.raises(OutOfOrderTimestamp):
            ingest(stream, strict=True)
        assert len(ingest(stream, strict=False).tracks) == 2


class TestLinking:
    def test_handoff_material_links_rotation(self):
        stream = [obs(t, "7B:00:00:00:00:01", seq=1234, payload=b"\xaa\xbb")
                  for t in (0.0, 1.0, 2.0)]
        stream.append(obs(2.5, "7B:00:00:00:00:02", seq=1234, payload=b"\xaa\xbb"))
        result = ingest(stream, epsilon_t=2.0)
        assert len(result.tracks) == 1
        track = result.tracks[0]
        assert [str(iv.address) for iv in track.mac_history] == \
            ["7B:00:00:00:00:01", "7B:00:00:00:00:02"]
        assert result.links[0][3] == "handoff"

    def test_nearby_status_links_rotation(self):
        status = b"\x1c\x12\x34\x56"
        stream = [obs(0.0, "7B:00:00:00:00:01", status=status),
                  obs(0.4, "7B:00:00:00:00:02", status=status)]
        result = ingest(stream)
        assert len(result.tracks) == 1
        assert result.links[0][3] == "nearby"

    def test_silence_beyond_epsilon_opens_new_track(self):
        status = b"\x1c\x12\x34\x56"
        stream = [obs(0.0, "7B:00:00:00:00:01", status=status),
                  obs(5.0, "7B:00:00:00:00:02", status=status)]
        assert len(ingest(stream, epsilon_t=2.0).tracks) == 2

    @staticmethod
    def _converged_tracks():
        """Two concurrent tracks whose status bytes are engineered to collide."""
        shared = b"\x1c\x77\x77\x77"
        return [obs(0.0, "7B:00:00:00:00:01", status=b"\x1c\x01\x01\x01"),
                obs(0.1, "7B:00:00:00:00:02", status=b"\x1c\x02\x02\x02"),
                obs(1.0, "7B:00:00:00:00:01", status=shared),
                obs(1.1, "7B:00:00:00:00:02", status=shared)]

    def test_two_silent_candidates_are_ambiguous(self):
        tracks = ingest(self._converged_tracks()).tracks
        assert len(tracks) == 2
        decision = link_rotation(tracks, obs(1.5, "7B:00:00:00:00:03",
                                             status=b"\x1c\x77\x77\x77"),
                                 epsilon_t=2.0)
        assert decision.outcome is LinkOutcome.AMBIGUOUS
        assert len(decision.candidates) == 2

    def test_ambiguous_is_surfaced_never_guessed(self):
        stream = self._converged_tracks()
        stream.append(obs(1.5, "7B:00:00:00:00:03", status=b"\x1c\x77\x77\x77"))
        result = ingest(stream)
        assert len(result.tracks) == 3  # no link was invented
        assert result.ambiguous_events

    def test_short_status_never_links(self):
        # the one-byte status shape is fleet-wide constant, not identifying
        stream = [obs(0.0, "7B:00:00:00:00:01", status=b"\x00"),
                  obs(0.4, "7B:00:00:00:00:02", status=b"\x00")]
        assert len(ingest(stream).tracks) == 2

    def test_icloud_id_links(self):
        cloud = b"\xde\xad\xbe\xef"
        stream = [obs(0.0, "7B:00:00:00:00:01", icloud=cloud),
                  obs(0.5, "7B:00:00:00:00:04", icloud=cloud)]
        result = ingest(stream)
        assert len(result.tracks) == 1
        assert result.links[0][3] == "icloud"

    def test_class_mismatch_blocks_link(self):
        status = b"\x1c\x12\x34\x56"
        stream = [obs(0.0, "7B:00:00:00:00:01", status=status,
                      cls=DeviceClass.MAC_LAPTOP,
                      os=OsFingerprint(OsFamily.MACOS, OsMajor.MOJAVE, ("t",))),
                  obs(0.4, "7B:00:00:00:00:02", status=status)]
        assert len(ingest(stream).tracks) == 2

    def test_observation_gap_splits_rather_than_guesses(self):
        # rotation during an observation gap: the linker must open a new
        # track, not invent a join from stale material
        stream = [obs(0.0, "7B:00:00:00:00:01", status=b"\x1c\x01\x02\x03"),
                  obs(60.0, "7B:00:00:00:00:02", status=b"\x1c\x01\x02\x03")]
        result = ingest(stream, epsilon_t=2.0)
        assert len(result.tracks) == 2
        assert not result.links

    def test_annotate_leaks_binds_track(self):
        from bletrack.tracker import annotate_leaks
        status = b"\x1c\xaa\xbb\xcc"
        mojave = OsFingerprint(OsFamily.MACOS, OsMajor.MOJAVE, ("t",))
        stream = [obs(0.0, "7B:00:00:00:00:01", status=status,
                      cls=DeviceClass.MAC_LAPTOP, os=mojave),
                  obs(1.0, "10:DD:B1:00:00:01", status=status,
                      cls=DeviceClass.MAC_LAPTOP, os=mojave,
                      kind=AddressKind.PUBLIC)]
        tracks = ingest(stream).tracks
        leaks = detect_global_mac_leak(stream)
        annotate_leaks(tracks, leaks)
        rpa_track = next(t for t in tracks
                         if str(t.current_address) == "7B:00:00:00:00:01")
        assert str(rpa_track.linked_public_mac) == "10:DD:B1:00:00:01"


class TestTrajectory:
    def test_exact_line(self):
        model = fit_trajectory([(0.0, 100), (3600.0, 150), (7200.0, 200)])
        assert model.slope == pytest.approx(50.0)
        assert model.residual_scale == pytest.approx(0.0)

    def test_idle_device_slope_zero(self):
        model = fit_trajectory([(0.0, 4242), (3600.0, 4242), (7200.0, 4242)])
        assert model.slope == 0.0
        assert model.residual_scale == 0.0

    def test_frozen_least_squares_oracle(self):
        # hand-derived on (hours, counts) = (0,100),(1,150),(2,210):
        # slope 55, intercept 295/3, residual scale sqrt(50/3)
        model = fit_trajectory([(0.0, 100), (3600.0, 150), (7200.0, 210)])
        assert model.slope == pytest.approx(55.0)
        assert model.intercept == pytest.approx(295.0 / 3.0)
        assert model.residual_scale == pytest.approx(math.sqrt(50.0 / 3.0))

    def test_unwrap_over_counter_wrap(self):
        assert unwrap_sequence([65530, 4]) == [65530, 65540]
        assert unwrap_sequence([10, 8, 12]) == [10, 8, 12]  # small noise dips stay local

    def test_fit_through_wraparound(self):
        samples = [(i * 3600.0, (65500 + 10 * i) % 65536) for i in range(10)]
        model = fit_trajectory(samples)
        assert model.slope == pytest.approx(10.0)

    def test_degenerate_inputs(self):
        with pytest.raises(DegenerateFit):
            fit_trajectory([(0.0, 5)])
        with pytest.raises(DegenerateFit):
            fit_trajectory([(10.0, 5), (10.0, 9)])

    def test_noisy_slope_recovery(self):
        rng = random.Random(42)
        recovered = []
        for _ in range(100):
            samples = [(h * 3600.0, round(1000 + 30.0 * h + rng.gauss(0, 10)) % 65536)
                       for h in range(48)]
            recovered.append(fit_trajectory(samples).slope)
        mean = sum(recovered) / len(recovered)
        assert abs(mean - 30.0) < 3.0


class TestPredictionWindow:
    def test_zero_residual_collapses_to_point(self):
        model = fit_trajectory([(0.0, 100), (3600.0, 150), (7200.0, 200)])
        window = prediction_window(model, 3 * 3600.0, 0.9)
        assert window.width_u == 1
        assert window.interval == (250, 250)
        assert window.contains(250) and not window.contains(251)

    def test_matches_standard_interval_formula(self):
        samples = [(h * 3600.0, v) for h, v in
                   [(0, 100), (1, 152), (2, 198), (3, 255), (4, 297)]]
        model = fit_trajectory(samples)
        t_query = 6 * 3600.0
        window = prediction_window(model, t_query, 0.9)
        # recompute the textbook interval independently
        xs = [0.0, 1.0, 2.0, 3.0, 4.0]
        ys = [100.0, 152.0, 198.0, 255.0, 297.0]
        n = len(xs)
        xm = sum(xs) / n
        sxx = sum((x - xm) ** 2 for x in xs)
        slope = sum((x - xm) * (y - sum(ys) / n) for x, y in zip(xs, ys)) / sxx
        intercept = sum(ys) / n - slope * xm
        s = math.sqrt(sum((y - intercept - slope * x) ** 2
                          for x, y in zip(xs, ys)) / (n - 2))
        x_new = 6.0
        margin = (scipy_stats.t.ppf(0.95, n - 2) * s *
                  math.sqrt(1 + 1 / n + (x_new - xm) ** 2 / sxx))
        center = intercept + slope * x_new
        assert window.interval[0] == math.floor(center - margin) % 65536
        assert window.interval[1] == math.ceil(center + margin) % 65536

    def test_wraparound_membership_exhaustive(self):
        window = window_from_width(0, 5)  # interval 65534..2
        assert window.interval == (65534, 2)
        members = {x for x in range(65536) if window.contains(x)}
        assert members == {65534, 65535, 0, 1, 2}

    def test_forced_width_windows(self):
        window = window_from_width(1000, 421)
        assert window.width_u == 421
        count = sum(window.contains(x) for x in range(65536))
        assert count == 421

    def test_full_circle_cap(self):
        window = window_from_width(5, 70000)
        assert window.width_u == 65536
        assert window.contains(0) and window.contains(65535)

    def test_confidence_validation(self):
        model = fit_trajectory([(0.0, 1), (3600.0, 2), (7200.0, 5)])
        with pytest.raises(ValueError):
            prediction_window(model, 0.0, 1.5)


class TestReidentify:
    target_bin = BinKey(DeviceClass.MOBILE_IOS, OsMajor.IOS12, "iPhone9,1")

    def test_unique_match(self):
        window = window_from_width(1000, 421)
        candidates = [obs(0.0, "7B:00:00:00:00:01", seq=1005, model="iPhone9,1")]
        verdict = reidentify(window, self.target_bin, candidates)
        assert verdict.kind is VerdictKind.UNIQUE_MATCH
        assert verdict.observation is candidates[0]

    def test_no_match(self):
        window = window_from_width(1000, 421)
        candidates = [obs(0.0, "7B:00:00:00:00:01", seq=40000, model="iPhone9,1")]
        assert reidentify(window, self.target_bin, candidates).kind is VerdictKind.NO_MATCH

    def test_collision(self):
        window = window_from_width(1000, 421)
        candidates = [obs(0.0, "7B:00:00:00:00:01", seq=1001, model="iPhone9,1"),
                      obs(0.0, "7B:00:00:00:00:02", seq=999, model="iPhone9,1")]
        verdict = reidentify(window, self.target_bin, candidates)
        assert verdict.kind is VerdictKind.COLLISION
        assert len(verdict.matches) == 2

    def test_unknown_model_counts_as_in_bin(self):
        window = window_from_width(1000, 421)
        candidates = [obs(0.0, "7B:00:00:00:00:01", seq=1001, model=None)]
        assert reidentify(window, self.target_bin,
                          candidates).kind is VerdictKind.UNIQUE_MATCH

    def test_out_of_bin_model_excluded(self):
        window = window_from_width(1000, 421)
        candidates = [obs(0.0, "7B:00:00:00:00:01", seq=1001, model="iPhone10,3")]
        assert reidentify(window, self.target_bin,
                          candidates).kind is VerdictKind.NO_MATCH


class TestCollisionProbability:
    def test_examples(self):
        assert collision_probability(0, 10) == 1.0
        assert collision_probability(65536, 1) == 0.0
        assert collision_probability(421, 50) == pytest.approx(0.7245, abs=1e-4)

    def test_monotonic_in_n_and_u(self):
        for u in (0, 1, 421, 813, 5000, 65536):
            values = [collision_probability(u, n) for n in range(0, 200, 7)]
            assert all(a >= b for a, b in zip(values, values[1:]))
        for n in (0, 1, 5, 50, 200):
            values = [collision_probability(u, n) for u in range(0, 65537, 1024)]
            assert all(a >= b for a, b in zip(values, values[1:]))

    def test_input_validation(self):
        with pytest.raises(ValueError):
            collision_probability(-1, 5)
        with pytest.raises(ValueError):
            collision_probability(70000, 5)
        with pytest.raises(ValueError):
            collision_probability(10, -1)


class TestLeakDetection:
    MOJAVE = OsFingerprint(OsFamily.MACOS, OsMajor.MOJAVE, ("t",))

    def test_status_match_binds_public_to_rpa(self):
        status = b"\x1c\xaa\xbb\xcc"
        stream = [
            obs(0.0, "7B:00:00:00:00:01", status=status, cls=DeviceClass.MAC_LAPTOP,
                os=self.MOJAVE),
            obs(1.0, "7B:00:00:00:00:01", seq=5, cls=DeviceClass.MAC_LAPTOP,
                os=self.MOJAVE),
            obs(1.5, "10:DD:B1:00:00:01", status=status, cls=DeviceClass.MAC_LAPTOP,
                os=self.MOJAVE, kind=AddressKind.PUBLIC),
        ]
        reports = detect_global_mac_leak(stream)
        assert len(reports) == 1
        report = reports[0]
        assert str(report.public_mac) == "10:DD:B1:00:00:01"
        assert str(report.rpa) == "7B:00:00:00:00:01"
        wifi = {str(m) for m in report.wifi_mac_candidates}
        assert wifi == {"10:DD:B1:00:00:00", "10:DD:B1:00:00:02"}

    def test_no_status_match_no_report(self):
        stream = [
            obs(0.0, "7B:00:00:00:00:01", status=b"\x1c\x01\x02\x03",
                cls=DeviceClass.MAC_LAPTOP, os=self.MOJAVE),
            obs(1.0, "10:DD:B1:00:00:01", status=b"\x1c\x09\x08\x07",
                cls=DeviceClass.MAC_LAPTOP, os=self.MOJAVE, kind=AddressKind.PUBLIC),
        ]
        assert detect_global_mac_leak(stream) == []

    def test_rpa_only_fleet_no_reports(self):
        stream = [obs(float(i), "7B:00:00:00:00:0" + str(i % 3 + 1),
                      status=b"\x1c\x01\x02\x03") for i in range(9)]
        assert detect_global_mac_leak(stream) == []

    def test_concurrency_required(self):
        status = b"\x1c\xaa\xbb\xcc"
        stream = [
            obs(0.0, "7B:00:00:00:00:01", status=status, cls=DeviceClass.MAC_LAPTOP,
                os=self.MOJAVE),
            obs(500.0, "10:DD:B1:00:00:01", status=status,
                cls=DeviceClass.MAC_LAPTOP, os=self.MOJAVE, kind=AddressKind.PUBLIC),
        ]
        assert detect_global_mac_leak(stream, concurrency_window=30.0) == []


class TestSsidIndex:
    def test_empty_string_digest_vector(self):
        assert ssid_hash3("") == bytes.fromhex("e3b0c4")
        index = build_ssid_index([""])
        assert lookup_ssid(bytes.fromhex("e3b0c4"), index) == [""]

    def test_absent_prefix_empty(self):
        index = build_ssid_index(["HomeNet"])
        assert lookup_ssid(b"\x00\x00\x00", index) == []

    def test_brute_forced_collision_returns_both(self):
        # found by exhaustive search over the netN namespace
        a, b = "net1669", "net2713"
        assert ssid_hash3(a) == ssid_hash3(b)
        index = build_ssid_index([a, b, "other"])
        assert sorted(lookup_ssid(ssid_hash3(a), index)) == [a, b]


class TestIcloudCluster:
    def test_same_id_same_day_clusters(self):
        cloud = b"\x01\x02\x03\x04"
        tracks = ingest([obs(0.0, "7B:00:00:00:00:01", icloud=cloud),
                         obs(3600.0, "7B:00:00:00:00:02", icloud=cloud)]).tracks
        clusters = icloud_cluster(tracks)
        assert frozenset({tracks[0].track_id, tracks[1].track_id}) in clusters

    def test_same_id_days_apart_separate(self):
        cloud = b"\x01\x02\x03\x04"
        tracks = ingest([obs(0.0, "7B:00:00:00:00:01", icloud=cloud),
                         obs(3 * 86400.0, "7B:00:00:00:00:02", icloud=cloud)]).tracks
        clusters = icloud_cluster(tracks)
        assert all(len(c) == 1 for c in clusters)

    def test_choreography_clusters(self):
        stream = []
        for k in range(3):
            t = 100.0 * k
            stream.append(obs(t, "7B:00:00:00:00:01", icloud=bytes([9, 9, 9, k])))
            stream.append(obs(t + 0.5, "7B:00:00:00:00:02", hotspot=True))
        tracks = ingest(stream).tracks
        clusters = icloud_cluster(tracks)
        assert frozenset({tracks[0].track_id, tracks[1].track_id}) in clusters

    def test_single_response_not_enough(self):
        stream = [obs(0.0, "7B:00:00:00:00:01", icloud=b"\x09\x09\x09\x00"),
                  obs(0.5, "7B:00:00:00:00:02", hotspot=True)]
        tracks = ingest(stream).tracks
        clusters = icloud_cluster(tracks)
        assert all(len(c) == 1 for c in clusters)
