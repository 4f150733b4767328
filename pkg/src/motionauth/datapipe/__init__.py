from .records import (CSV_HEADER, SENSOR_ORDER, Posture, SensorKind, SensorSeries,
                      SessionRecording, export_session, load_dataset, parse_session,
                      read_sensor_csv, session_from_manifest, write_manifest, write_sensor_csv)
from .resample import CHANNEL_NAMES, ResampledSession, resample, resample_axis
from .splits import PairSet, UserSplit, sample_pairs, split_users
from .synth import (DEFAULT_CONFIG, SynthConfig, SynthUserProfile, gen_dataset, gen_profile,
                    gen_session)
from .windows import (MODALITIES, WINDOW_SECONDS, Window, WindowPool, load_window_cache,
                      make_windows, samples_per_channel, save_window_cache, window_count,
                      windows_from_sessions)
