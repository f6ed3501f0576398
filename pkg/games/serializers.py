import numpy as np
from rest_framework import serializers

from core.exceptions import SpecError
from games.specs import DriftTable, PopulationSpec, SubpopParams


class ArrayField(serializers.Field):
    """Row-major nested list <-> float ndarray of a fixed rank."""

    default_error_messages = {
        'invalid': 'Expected a numeric array of rank {ndim}.',
        'not_finite': 'Array contains non-finite entries.',
    }

    def __init__(self, ndim=2, **kwargs):
        self.ndim = ndim
        super().__init__(**kwargs)

    def to_internal_value(self, data):
        try:
            arr = np.array(data, dtype=float)
        except (TypeError, ValueError):
            self.fail('invalid', ndim=self.ndim)
        if arr.ndim == 0 and self.ndim > 0:
            arr = arr.reshape((1,) * self.ndim)
        if arr.ndim != self.ndim:
            self.fail('invalid', ndim=self.ndim)
        if not np.all(np.isfinite(arr)):
            self.fail('not_finite')
        return arr

    def to_representation(self, value):
        return np.asarray(value, dtype=float).tolist()


class DriftField(serializers.Field):
    """b(t): null, a constant vector, or {"kind": "piecewise"|"affine", ...}."""

    default_error_messages = {
        'invalid': 'Expected null, a vector, or an object with kind piecewise/affine.',
    }

    def to_internal_value(self, data):
        try:
            if data is None:
                return None
            if isinstance(data, (list, int, float)):
                return DriftTable.constant(np.array(data, dtype=float))
            if isinstance(data, dict):
                kind = data.get('kind', 'constant')
                if kind == 'constant':
                    return DriftTable.constant(np.array(data['value'], dtype=float))
                if kind == 'piecewise':
                    return DriftTable('piecewise', np.array(data['values'], dtype=float),
                                      times=np.array(data['times'], dtype=float))
                if kind == 'affine':
                    return DriftTable('affine', np.array(data['intercept'], dtype=float),
                                      slope=np.array(data['slope'], dtype=float))
        except (KeyError, TypeError, ValueError, SpecError) as exc:
            raise serializers.ValidationError(str(exc))
        self.fail('invalid')

    def to_representation(self, value):
        if value.kind == 'constant':
            return value.values.tolist()
        if value.kind == 'piecewise':
            return {'kind': 'piecewise', 'times': value.times.tolist(), 'values': value.values.tolist()}
        return {'kind': 'affine', 'intercept': value.values.tolist(), 'slope': value.slope.tolist()}


class SubpopSerializer(serializers.Serializer):
    A = ArrayField()
    B = ArrayField()
    F = ArrayField(required=False, allow_null=True, default=None)
    H = ArrayField(required=False, allow_null=True, default=None)
    D = ArrayField(required=False, allow_null=True, default=None)
    b = DriftField(required=False, allow_null=True, default=None)
    Q = ArrayField()
    R = ArrayField()
    S = ArrayField(required=False, allow_null=True, default=None)
    eta = ArrayField(ndim=1, required=False, allow_null=True, default=None)
    nvec = ArrayField(ndim=1, required=False, allow_null=True, default=None)
    psi = ArrayField(required=False, allow_null=True, default=None)
    lambda_explore = serializers.FloatField(min_value=0.0, default=0.0)
    phi_lagrange = serializers.FloatField(default=0.0)

    def validate(self, attrs):
        A, B = attrs['A'], attrs['B']
        n, m = A.shape[0], B.shape[1]
        defaults = {
            'F': np.zeros((n, n)), 'H': np.zeros((n, m)), 'D': np.zeros((n, 1)),
            'b': DriftTable.zeros(n), 'S': np.zeros((n, m)),
            'eta': np.zeros(n), 'nvec': np.zeros(m), 'psi': np.zeros((n, n)),
        }
        for key, value in defaults.items():
            if attrs.get(key) is None:
                attrs[key] = value
        return attrs


class PopulationSpecSerializer(serializers.Serializer):
    rho = serializers.FloatField()
    pi = ArrayField(ndim=1)
    x0_mean = ArrayField(ndim=1)
    x0_cov = ArrayField(required=False, allow_null=True, default=None)
    subpops = SubpopSerializer(many=True)

    def validate(self, attrs):
        if not attrs['subpops']:
            raise serializers.ValidationError({'subpops': 'at least one sub-population is required'})
        n = attrs['x0_mean'].shape[0]
        if attrs.get('x0_cov') is None:
            attrs['x0_cov'] = np.zeros((n, n))
        return attrs

    def create(self, validated_data):
        subpops = tuple(SubpopParams(**item) for item in validated_data['subpops'])
        return PopulationSpec(
            subpops=subpops,
            pi=validated_data['pi'],
            rho=validated_data['rho'],
            x0_mean=validated_data['x0_mean'],
            x0_cov=validated_data['x0_cov'],
        )

    def to_representation(self, instance):
        if isinstance(instance, PopulationSpec):
            return {
                'rho': instance.rho,
                'pi': instance.pi.tolist(),
                'x0_mean': instance.x0_mean.tolist(),
                'x0_cov': instance.x0_cov.tolist(),
                'subpops': [subpop_to_dict(p) for p in instance.subpops],
            }
        return super().to_representation(instance)


def subpop_to_dict(p):
    out = {name: np.asarray(getattr(p, name)).tolist()
           for name in ('A', 'B', 'F', 'H', 'D', 'Q', 'R', 'S', 'eta', 'nvec', 'psi')}
    out['b'] = DriftField().to_representation(p.b)
    out['lambda_explore'] = p.lambda_explore
    out['phi_lagrange'] = p.phi_lagrange
    return out


def load_spec(data) -> PopulationSpec:
    """Parse a JSON document into a PopulationSpec; raises SpecError with field errors."""
    serializer = PopulationSpecSerializer(data=data)
    if not serializer.is_valid():
        raise SpecError("malformed population spec", detail=serializer.errors)
    return serializer.save()


def dump_spec(spec: PopulationSpec) -> dict:
    return PopulationSpecSerializer(spec).data
