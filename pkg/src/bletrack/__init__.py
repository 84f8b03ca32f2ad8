"""BLE advertisement analysis toolkit.

Decodes Apple Continuity messages out of BLE advertising frames, fingerprints
device type and OS version, links identities across randomized MAC addresses
via sequence-number and status-byte persistence, and ships a deterministic
traffic simulator with ground-truth labels so every tracking claim can be
verified at desk scale without radio hardware.
"""

from .addressing import (
    AddressKind,
    Irk,
    MacAddress,
    Rpa,
    classify_address,
    generate_rpa,
    match_irk,
    resolve_rpa,
    rpa_hash,
)
from .capture import (
    CaptureRecord,
    ParseError,
    SchemaMismatch,
    read_capture,
    to_observations,
    write_capture,
)
from .codec import (
    AdFlags,
    AppleTlv,
    BleAdvertisement,
    CodecError,
    ContinuityMessage,
    FieldRange,
    FrameTooLarge,
    Handoff,
    InstantHotspot,
    MalformedMessage,
    Nearby,
    TruncatedFrame,
    Unknown,
    WatchConnection,
    WifiJoin,
    WifiSettings,
    decode_message,
    encode_advertisement,
    encode_message,
    parse_advertisement,
)
from .fingerprint import (
    ActionCode,
    ConsistencyVerdict,
    DeviceClass,
    ModelDescriptor,
    ModelTable,
    OsFamily,
    OsFingerprint,
    OsMajor,
    WifiRadioState,
    infer_device_class,
    infer_os_version,
    interpret_action,
    model_lookup,
    version_consistency,
    wifi_radio_state,
)
from .simulator import (
    ConfigInvalid,
    DeviceConfig,
    GroundTruth,
    InvalidTransition,
    OsVersion,
    ScenarioConfig,
    SimDevice,
    Simulation,
    UserEvent,
    gatt_model_response,
    run_scenario,
)
from .tracker import (
    BinKey,
    annotate_leaks,
    DeviceTrack,
    LeakReport,
    LinkOutcome,
    Observation,
    PredictionWindow,
    ReidentifyVerdict,
    TrajectoryModel,
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
    window_from_width,
)

__version__ = "0.1.0"
