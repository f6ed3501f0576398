from rest_framework import serializers

from core.exceptions import SpecError
from trading.learning import LearningTrace
from trading.market import MarketParams


class MarketParamsSerializer(serializers.Serializer):
    sigma = serializers.FloatField()
    lambda_perm = serializers.FloatField(min_value=0.0)
    a_temp = serializers.FloatField(min_value=0.0)
    phi_urgency = serializers.FloatField(min_value=0.0)
    psi_terminal = serializers.FloatField(min_value=0.0)
    T = serializers.FloatField()
    F0 = serializers.FloatField(default=100.0)
    q0 = serializers.FloatField(default=1.0)
    kappa_rate = serializers.FloatField(default=0.1)

    def validate_sigma(self, value):
        if value <= 0:
            raise serializers.ValidationError('sigma must be positive')
        return value

    def validate_T(self, value):
        if value <= 0:
            raise serializers.ValidationError('T must be positive')
        return value

    def validate_kappa_rate(self, value):
        if value <= 0:
            raise serializers.ValidationError('kappa_rate must be positive')
        return value

    def create(self, validated_data):
        return MarketParams(**validated_data)


class InitialGuessSerializer(serializers.Serializer):
    """Starting values of the estimated parameters; missing keys fall back to the market's."""

    sigma = serializers.FloatField(required=False)
    lambda_perm = serializers.FloatField(required=False, min_value=0.0)
    a_temp = serializers.FloatField(required=False, min_value=0.0)


class TradingDocumentSerializer(serializers.Serializer):
    market = MarketParamsSerializer()
    init = InitialGuessSerializer(required=False, default=dict)
    lambda_explore = serializers.FloatField(min_value=0.0, default=0.0)


def load_trading_document(data):
    """Returns (true params, initial params, lambda_explore)."""
    serializer = TradingDocumentSerializer(data=data)
    if not serializer.is_valid():
        raise SpecError("malformed market parameters", detail=serializer.errors)
    attrs = serializer.validated_data
    market = MarketParams(**attrs['market'])
    init = market.replace(**attrs['init'])
    return market, init, attrs['lambda_explore']


class LearningTraceSerializer(serializers.BaseSerializer):
    def to_representation(self, instance: LearningTrace):
        return {
            'records': instance.to_rows(),
            'dataset_sizes': instance.dataset_sizes(),
            'completed': instance.completed,
            'failure': instance.failure,
        }
