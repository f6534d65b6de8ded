import dataclasses
import typing
from enum import Enum

import numpy as np

from .errors import ConfigurationError


def as_plain(obj):
    """
    Converts a (nested) configuration object into plain python containers that json/yaml can dump.
    Dataclasses become dicts in field order, enums become their value (or their name when the value
    is not a plain scalar, e.g. function registries), tuples become lists.
    """
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: as_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        if isinstance(obj.value, (str, int, float)):
            return obj.value
        return obj.name
    if isinstance(obj, dict):
        return {str(key): as_plain(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [as_plain(value) for value in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def from_plain(cls, data, where=""):
    """
    Inverse of as_plain. Unknown keys are refused.
    :param cls: The target type (dataclass, Enum, primitive or typing construct)
    :param data: Plain data as read from json/yaml
    :param where: Dotted path of data, used in error messages
    """
    origin = typing.get_origin(cls)
    args = typing.get_args(cls)

    if cls is typing.Any:
        return data

    if origin is typing.Union:
        if data is None and type(None) in args:
            return None
        candidates = [a for a in args if a is not type(None)]
        last_error = None
        for candidate in candidates:
            try:
                return from_plain(candidate, data, where)
            except ConfigurationError as e:
                last_error = e
        raise last_error

    if origin in (tuple, list):
        if not isinstance(data, (list, tuple)):
            raise ConfigurationError(f"{where or 'value'} must be a list, got {data!r}", key=where)
        if origin is tuple and len(args) > 0 and args[-1] is not Ellipsis:
            if len(args) != len(data):
                raise ConfigurationError(f"{where or 'value'} must have {len(args)} elements", key=where)
            items = [from_plain(a, d, f"{where}[{i}]") for i, (a, d) in enumerate(zip(args, data))]
        else:
            item_type = args[0] if args else typing.Any
            items = [from_plain(item_type, d, f"{where}[{i}]") for i, d in enumerate(data)]
        return tuple(items) if origin is tuple else items

    if origin is dict:
        if not isinstance(data, dict):
            raise ConfigurationError(f"{where or 'value'} must be a mapping", key=where)
        value_type = args[1] if len(args) == 2 else typing.Any
        return {key: from_plain(value_type, value, f"{where}.{key}") for key, value in data.items()}

    if isinstance(cls, type) and dataclasses.is_dataclass(cls):
        if isinstance(data, cls):
            return data
        if not isinstance(data, dict):
            raise ConfigurationError(f"{where or cls.__name__} must be a mapping", key=where)
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls) if f.init}
        for key in data:
            if key not in known:
                path = f"{where}.{key}" if where else key
                raise ConfigurationError(f"Unknown configuration key '{path}'", key=path)
        kwargs = {}
        for key, value in data.items():
            kwargs[key] = from_plain(hints[key], value, f"{where}.{key}" if where else key)
        try:
            return cls(**kwargs)
        except (RuntimeError, TypeError, ValueError) as e:
            if isinstance(e, ConfigurationError):
                raise
            raise ConfigurationError(f"Invalid {where or cls.__name__}: {e}", key=where)

    if isinstance(cls, type) and issubclass(cls, Enum):
        if isinstance(data, cls):
            return data
        for member in cls:
            if member.value == data:
                return member
        if isinstance(data, str):
            for member in cls:
                if member.name.lower() == data.lower():
                    return member
        raise ConfigurationError(
            f"{where or cls.__name__} must be one of {[m.name.lower() for m in cls]}, got {data!r}", key=where
        )

    if cls is bool:
        if not isinstance(data, bool):
            raise ConfigurationError(f"{where} must be a boolean, got {data!r}", key=where)
        return data
    if cls is int:
        if isinstance(data, bool) or not isinstance(data, int):
            raise ConfigurationError(f"{where} must be an integer, got {data!r}", key=where)
        return data
    if cls is float:
        if isinstance(data, str):
            # yaml reads exponents without a dot (1e-4) as strings
            try:
                return float(data)
            except ValueError:
                pass
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise ConfigurationError(f"{where} must be a number, got {data!r}", key=where)
        return float(data)
    if cls is str:
        if not isinstance(data, str):
            raise ConfigurationError(f"{where} must be a string, got {data!r}", key=where)
        return data
    return data
