"""Function-level, runtime-reconfigurable performance-counter profiling."""

from .backend import (BackendDescriptor, CounterSample, EventGroup,
                      PerfEventBackend, ResourceError, SimulatedBackend,
                      StateError, ValidationError, validate_events)
from .config import (ContextConfig, EventSpec, FunctionContextSpec, ParseError,
                     parse_config, serialize_config)
from .registry import (ContextRegistry, FunctionContext, InstallWarning,
                       RegistryEpoch, ReloadOutcome)
from .report import (ComparisonError, FunctionReport, GroupReport,
                     ProfileReport, RatioTable, SchemaError,
                     average_multiplexed, compare_reports, emit_report,
                     parse_report, render_report)
from .runtime import CallbackRuntime, SessionState, multiplex_group_index
from .symbols import (AmbiguousNameError, FormatError, SymbolMap,
                      load_symbol_map)

__version__ = "0.1.0"
