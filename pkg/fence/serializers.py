# serializers.py
import math
from collections.abc import Mapping

from django.conf import settings
from rest_framework import serializers

from .costvol import CostVolumeParams
from .defence import CUE_FUSIONS, CUES, INPAINT_METHODS, MODES, SegmentConfig
from .dpform import ThinLens
from .structfreq import FUSION_MODES
from .synthpipe import SynthConfig

SUBCOMMANDS = ('synth', 'disparity', 'segment', 'remove', 'eval', 'psf-preview')

_SYNTH = SynthConfig()
_SEGMENT = SegmentConfig()
_COST = CostVolumeParams()


class StrictSerializer(serializers.Serializer):
    """Rejects keys that are not declared fields."""

    def to_internal_value(self, data):
        if isinstance(data, Mapping):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown key.'] for key in unknown})
        return super().to_internal_value(data)


class ConfigSerializer(StrictSerializer):
    """Builds the frozen config dataclass; its own range checks surface as validation errors."""
    config_class = None

    def build(self, attrs):
        return self.config_class(**attrs)

    def validate(self, attrs):
        try:
            self.build(attrs)
        except ValueError as exc:
            raise serializers.ValidationError(str(exc)) from exc
        return attrs

    def create(self, validated_data):
        return self.build(validated_data)


class FocusDistanceField(serializers.FloatField):
    """Focus distance in meters; JSON null stands for infinity."""

    def to_representation(self, value):
        if value is None or math.isinf(value):
            return None
        return super().to_representation(value)


class ThinLensSerializer(ConfigSerializer):
    config_class = ThinLens

    d_focus = FocusDistanceField(allow_null=True, default=None)
    blur_constant = serializers.FloatField(default=1.0)

    def build(self, attrs):
        attrs = dict(attrs)
        if attrs.get('d_focus') is None:
            attrs['d_focus'] = math.inf
        return ThinLens(**attrs)


class SynthConfigSerializer(ConfigSerializer):
    config_class = SynthConfig

    d_min = serializers.FloatField(default=_SYNTH.d_min)
    d_max = serializers.FloatField(default=_SYNTH.d_max)
    lens = ThinLensSerializer(required=False)
    grid_shape = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=2, max_length=2,
                                       default=list(_SYNTH.grid_shape))
    rotation_deg = serializers.FloatField(min_value=0, default=_SYNTH.rotation_deg)
    scale_range = serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2,
                                        default=list(_SYNTH.scale_range))
    translate_px = serializers.FloatField(min_value=0, default=_SYNTH.translate_px)
    flip_horizontal = serializers.BooleanField(default=_SYNTH.flip_horizontal)
    flip_vertical = serializers.BooleanField(default=_SYNTH.flip_vertical)
    brightness = serializers.FloatField(min_value=0, default=_SYNTH.brightness)
    contrast = serializers.FloatField(min_value=0, default=_SYNTH.contrast)
    hue = serializers.FloatField(min_value=0, default=_SYNTH.hue)
    base_seed = serializers.IntegerField(min_value=0, default=_SYNTH.base_seed)
    max_attempts = serializers.IntegerField(min_value=1, default=_SYNTH.max_attempts)
    min_coverage = serializers.FloatField(min_value=0, max_value=1, default=_SYNTH.min_coverage)

    def build(self, attrs):
        attrs = dict(attrs)
        lens = attrs.pop('lens', None)
        attrs['lens'] = ThinLensSerializer().build(lens) if lens is not None else ThinLens()
        return SynthConfig(**attrs)


class CostVolumeParamsSerializer(ConfigSerializer):
    config_class = CostVolumeParams

    d_max = serializers.FloatField(min_value=0, default=_COST.d_max)
    step = serializers.FloatField(default=_COST.step)
    window = serializers.IntegerField(min_value=1, default=_COST.window)


class SegmentConfigSerializer(ConfigSerializer):
    config_class = SegmentConfig

    tau_d = serializers.FloatField(default=_SEGMENT.tau_d)
    tau_c = serializers.FloatField(min_value=0, max_value=1, default=_SEGMENT.tau_c)
    w_geo = serializers.FloatField(min_value=0, max_value=1, default=_SEGMENT.w_geo)
    w_struct = serializers.FloatField(min_value=0, max_value=1, default=_SEGMENT.w_struct)
    morph_radius = serializers.IntegerField(min_value=0, default=_SEGMENT.morph_radius)
    dilate_radius = serializers.IntegerField(min_value=0, default=_SEGMENT.dilate_radius)
    tau_m = serializers.FloatField(min_value=0, max_value=1, default=_SEGMENT.tau_m)
    periodicity_window = serializers.IntegerField(min_value=4, default=_SEGMENT.periodicity_window)
    cues = serializers.ChoiceField(choices=CUES, default=_SEGMENT.cues)
    cue_fusion = serializers.ChoiceField(choices=CUE_FUSIONS, default=_SEGMENT.cue_fusion)
    edge_band = serializers.IntegerField(min_value=0, default=_SEGMENT.edge_band)
    edge_fraction = serializers.FloatField(min_value=0, max_value=1, default=_SEGMENT.edge_fraction)
    mode = serializers.ChoiceField(choices=MODES, default=_SEGMENT.mode)
    fusion = serializers.ChoiceField(choices=FUSION_MODES, default=_SEGMENT.fusion)
    seed = serializers.IntegerField(min_value=0, default=_SEGMENT.seed)
    inpaint_method = serializers.ChoiceField(choices=INPAINT_METHODS, default=_SEGMENT.inpaint_method)
    cost_volume = CostVolumeParamsSerializer(required=False)

    def validate_periodicity_window(self, value):
        if value & (value - 1):
            raise serializers.ValidationError('Must be a power of two.')
        return value

    def build(self, attrs):
        attrs = dict(attrs)
        cost = attrs.pop('cost_volume', None)
        attrs['cost_volume'] = CostVolumeParams(**cost) if cost is not None else CostVolumeParams()
        return SegmentConfig(**attrs)


class RunConfigSerializer(StrictSerializer):
    """Top level of a `--config` JSON file; every block is optional."""
    seed = serializers.IntegerField(min_value=0, required=False)
    threads = serializers.IntegerField(min_value=1, required=False)
    synth = SynthConfigSerializer(required=False)
    segment = SegmentConfigSerializer(required=False)
    cost_volume = CostVolumeParamsSerializer(required=False)


class SampleRecordSerializer(StrictSerializer):
    sample_id = serializers.CharField()
    index = serializers.IntegerField(min_value=0)
    seed = serializers.IntegerField(min_value=0)
    depth = serializers.FloatField()
    alpha = serializers.FloatField(min_value=0)
    expected_disparity = serializers.FloatField()
    asset = serializers.CharField()
    clean = serializers.CharField()
    attempts = serializers.IntegerField(min_value=1)
    coverage = serializers.FloatField(min_value=0, max_value=1)
    split = serializers.ChoiceField(choices=('train', 'test'))
    files = serializers.DictField(child=serializers.CharField())
    patches = serializers.ListField(child=serializers.DictField(), default=list)

    def validate_files(self, value):
        missing = {'occluded', 'clean', 'soft_mask', 'mask'} - set(value)
        if missing:
            raise serializers.ValidationError(f'Missing file entries: {", ".join(sorted(missing))}.')
        return value


class PatchSettingsSerializer(StrictSerializer):
    size = serializers.IntegerField(min_value=1)
    stride = serializers.IntegerField(min_value=1)


class ManifestSerializer(StrictSerializer):
    schema_version = serializers.IntegerField()
    config = SynthConfigSerializer()
    config_hash = serializers.RegexField(r'^[0-9a-f]{64}$')
    n_samples = serializers.IntegerField(min_value=1)
    split_rule = serializers.CharField()
    splits = serializers.DictField(child=serializers.ListField(child=serializers.CharField()))
    clean_frames = serializers.ListField(child=serializers.CharField(), min_length=1)
    assets = serializers.ListField(child=serializers.CharField(), min_length=1)
    patch = PatchSettingsSerializer(allow_null=True)
    records = SampleRecordSerializer(many=True)

    def validate_schema_version(self, value):
        if value != settings.FENCE_SCHEMA_VERSION:
            raise serializers.ValidationError(f'Unsupported schema version {value}.')
        return value

    def validate(self, attrs):
        if len(attrs['records']) != attrs['n_samples']:
            raise serializers.ValidationError('Record count does not match n_samples.')
        return attrs


def parse_config(serializer_class, data):
    """Validate a JSON block and return (config object, echo with defaults materialized)."""
    serializer = serializer_class(data=data if data is not None else {})
    serializer.is_valid(raise_exception=True)
    config = serializer.save()
    return config, dict(serializer_class(config).data)


def echo(serializer_class, config):
    return dict(serializer_class(config).data)
