import pytest

from bletrack.codec import AdFlags, Nearby
from bletrack.fingerprint import (
    ActionCode,
    DeviceClass,
    ModelTable,
    OsFamily,
    OsFingerprint,
    OsMajor,
    WifiRadioState,
    default_model_table,
    infer_device_class,
    infer_os_version,
    interpret_action,
    model_lookup,
    version_consistency,
    wifi_radio_state,
)

MOBILE = AdFlags.from_bits(True, True, False)
LAPTOP = AdFlags.from_bits(False, False, True)


class TestDeviceClass:
    def test_mobile_flags(self):
        assert infer_device_class(MOBILE, {0x10}) is DeviceClass.MOBILE_IOS

    def test_laptop_flags(self):
        assert infer_device_class(LAPTOP, {0x10, 0x0C}) is DeviceClass.MAC_LAPTOP

    def test_watch_type_overrides_flags(self):
        assert infer_device_class(MOBILE, {0x0B}) is DeviceClass.APPLE_WATCH
        assert infer_device_class(None, {0x0B}) is DeviceClass.APPLE_WATCH

    def test_airpods_no_flags_plus_type(self):
        assert infer_device_class(None, {0x07}) is DeviceClass.AIRPODS

    def test_unknown_fallback(self):
        assert infer_device_class(None, {0x10}) is DeviceClass.UNKNOWN_APPLE
        assert infer_device_class(AdFlags(0x00), {0x10}) is DeviceClass.UNKNOWN_APPLE


class TestOsVersion:
    def test_ios10_shape(self):
        fp = infer_os_version(Nearby(0, 3, b"\x00"), DeviceClass.MOBILE_IOS)
        assert (fp.family, fp.major) == (OsFamily.IOS, OsMajor.IOS10)

    def test_ios11_shape(self):
        fp = infer_os_version(Nearby(0, 3, b"\x10\x01\x02\x03"), DeviceClass.MOBILE_IOS)
        assert fp.major is OsMajor.IOS11

    @pytest.mark.parametrize("byte1", [0x18, 0x1C])
    def test_ios12_shape(self, byte1):
        fp = infer_os_version(Nearby(0, 3, bytes([byte1, 1, 2, 3])),
                              DeviceClass.MOBILE_IOS)
        assert fp.major is OsMajor.IOS12

    def test_macos_split(self):
        mojave = infer_os_version(Nearby(0, 11, b"\x1c\x01\x02\x03"),
                                  DeviceClass.MAC_LAPTOP)
        assert (mojave.family, mojave.major) == (OsFamily.MACOS, OsMajor.MOJAVE)
        older = infer_os_version(Nearby(0, 11, b"\x10\x01\x02\x03"),
                                 DeviceClass.MAC_LAPTOP)
        assert older.major is OsMajor.PRE_MOJAVE

    def test_odd_shape_is_unknown_with_evidence(self):
        fp = infer_os_version(Nearby(0, 3, b"\x42\x42"), DeviceClass.MOBILE_IOS)
        assert fp.major is OsMajor.UNKNOWN
        assert fp.evidence  # shape recorded for later review

    def test_injective_on_known_shapes(self):
        shapes = [b"\x00", b"\x10\x00\x00\x00", b"\x18\x00\x00\x00", b"\x1c\x00\x00\x00"]
        majors = {infer_os_version(Nearby(0, 3, s), DeviceClass.MOBILE_IOS).major
                  for s in shapes}
        assert majors == {OsMajor.IOS10, OsMajor.IOS11, OsMajor.IOS12}


class TestWifiRadio:
    def test_off(self):
        assert wifi_radio_state(Nearby(0, 3, b"\x18\x00\x00\x00")) is WifiRadioState.OFF

    def test_on(self):
        assert wifi_radio_state(Nearby(0, 3, b"\x1c\x00\x00\x00")) is WifiRadioState.ON

    def test_ios10_shape_carries_no_radio_bit(self):
        assert wifi_radio_state(Nearby(0, 3, b"\x00")) is WifiRadioState.UNKNOWN


class TestActionCodes:
    def test_documented_codes(self):
        assert interpret_action(1) is ActionCode.RECENTLY_UPDATED
        assert interpret_action(3) is ActionCode.LOCKED_SCREEN
        assert interpret_action(7) is ActionCode.TRANSITION_PHASE
        assert interpret_action(10) is ActionCode.LOCKED_INFORM_WATCH
        assert interpret_action(11) is ActionCode.ACTIVE_USER
        assert interpret_action(14) is ActionCode.PHONE_OR_FACETIME

    def test_unreproduced_code_surfaced_not_interpreted(self):
        code = interpret_action(13)
        assert code is ActionCode.UNKNOWN_13
        assert not code.documented

    def test_total_over_nibble(self):
        for value in range(16):
            assert interpret_action(value).value == value

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            interpret_action(16)


class TestConsistency:
    def test_nearby_contradicts_ios9(self):
        claim = OsFingerprint(OsFamily.IOS, OsMajor.IOS9, ("claim",))
        verdict = version_consistency({0x10}, claim)
        assert not verdict.consistent and verdict.conflicts

    def test_handoff_fine_on_ios8(self):
        claim = OsFingerprint(OsFamily.IOS, OsMajor.IOS8, ("claim",))
        assert version_consistency({0x0C}, claim).consistent

    def test_wifi_join_contradicts_ios10(self):
        claim = OsFingerprint(OsFamily.IOS, OsMajor.IOS10, ("claim",))
        assert not version_consistency({0x0F}, claim).consistent

    def test_empty_observations_vacuous(self):
        claim = OsFingerprint(OsFamily.IOS, OsMajor.IOS9, ("claim",))
        assert version_consistency(set(), claim).consistent

    def test_unknown_claim_vacuous(self):
        assert version_consistency({0x10, 0x0F}, OsFingerprint()).consistent


class TestModelTable:
    def test_iphone7_lookup(self):
        desc = model_lookup("iPhone9,1")
        assert desc.marketing_name == "iPhone 7"
        assert desc.family == "iphone"
        assert desc.population_share > 0

    def test_macbook_lookup(self):
        desc = model_lookup("MacBookPro11,4")
        assert "Mid 2015" in desc.marketing_name
        assert desc.family == "mac"

    def test_unknown_identifier(self):
        desc = model_lookup("Toaster1,1")
        assert desc.marketing_name == "unknown"
        assert desc.population_share == 0.0

    def test_family_shares_sum_to_one(self):
        table = default_model_table()
        for family in ("iphone", "mac"):
            assert abs(table.family_shares(family) - 1.0) < 1e-9

    def test_submodel_split_is_even(self):
        table = default_model_table()
        a = table.lookup("iPhone9,1").population_share
        b = table.lookup("iPhone9,3").population_share
        assert a == b > 0

    def test_custom_table_load(self, tmp_path):
        doc = {"schema_version": 1, "models": [
            {"identifier": "X1,1", "marketing_name": "X", "family": "x", "share": 1.0}]}
        import json
        path = tmp_path / "models.json"
        path.write_text(json.dumps(doc))
        table = ModelTable.load(str(path))
        assert table.lookup("X1,1").marketing_name == "X"
