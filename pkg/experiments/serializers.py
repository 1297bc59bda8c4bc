from rest_framework import serializers

from lavagrid.services import LAYOUT_MAPS, LAYOUT_NAMES, parse_layout
from shields.models import StoredShield
from .models import ExperimentRun, EpisodeMetric

PROTOCOLS = ('single', 'multi', 'goal')
SHIELD_MODES = ('none', 'individual', 'shared')
ALGORITHMS = ('ppo', 'shieldppo')
ONLINE_SHIELD_VARIANTS = ('tabular', 'bounded', 'bloom')

DEFAULT_SEEDS = [0, 1, 2, 3, 4]
DEFAULT_MULTI_AGENTS = 10
DEFAULT_GOAL_EVAL_EVERY = 50


class ExperimentConfigSerializer(serializers.Serializer):
    """
    Validation d'une configuration d'expérience (fichier clé = valeur + --set)

    Les clés absentes prennent leur valeur par défaut ; les dépendances entre
    protocole et champs sont vérifiées dans validate().
    """

    # [experiment]
    name = serializers.RegexField(r'^[A-Za-z0-9_.-]+$', max_length=100, default='experiment')
    protocol = serializers.ChoiceField(choices=PROTOCOLS)
    seeds = serializers.ListField(child=serializers.IntegerField(min_value=-(2 ** 63), max_value=2 ** 63 - 1), min_length=1, default=DEFAULT_SEEDS)
    episodes = serializers.IntegerField(min_value=0, default=500)
    agent_count = serializers.IntegerField(min_value=1, required=False)
    shield_mode = serializers.ChoiceField(choices=SHIELD_MODES, required=False)
    algorithm = serializers.ChoiceField(choices=ALGORITHMS, required=False)

    # [environment]
    layout = serializers.ChoiceField(choices=LAYOUT_NAMES, required=False)
    lava_growth = serializers.FloatField(min_value=1.0, default=1.2)
    lava_p_cap = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.5)
    tile_probability = serializers.FloatField(min_value=0.0, max_value=0.99, required=False, allow_null=True)
    instance_pool = serializers.IntegerField(min_value=0, default=0)
    max_steps_per_episode = serializers.IntegerField(min_value=0, default=0, help_text="0 = 4 x (largeur + hauteur)")
    shaping_sign = serializers.FloatField(default=-1.0)

    # [agent]
    gamma = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.99)
    lam = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.95)
    clip = serializers.FloatField(min_value=0.0, default=0.2)
    learning_rate = serializers.FloatField(min_value=0.0, default=3e-4)
    epochs = serializers.IntegerField(min_value=1, default=4)
    minibatch = serializers.IntegerField(min_value=1, default=64)
    entropy_coef = serializers.FloatField(min_value=0.0, default=0.01)
    value_coef = serializers.FloatField(min_value=0.0, default=0.5)
    segment = serializers.IntegerField(min_value=1, default=2048)
    hidden = serializers.IntegerField(min_value=1, default=64)
    max_grad_norm = serializers.FloatField(min_value=0.0, default=0.5)
    default_policy = serializers.ListField(child=serializers.FloatField(min_value=0.0), required=False)

    # [shield]
    shield_variant = serializers.ChoiceField(choices=ONLINE_SHIELD_VARIANTS, default='tabular')
    shield_capacity = serializers.IntegerField(min_value=1, default=1024)
    bloom_expected_n = serializers.IntegerField(min_value=1, default=10_000)
    bloom_target_fp = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.01)
    parametric_probe = serializers.BooleanField(default=False)
    probe_epochs = serializers.IntegerField(min_value=1, default=200)
    probe_reservoir = serializers.IntegerField(min_value=1, default=2000)

    # [evaluation]
    eval_every = serializers.IntegerField(min_value=0, required=False)
    eval_episodes = serializers.IntegerField(min_value=1, default=5)
    success_threshold = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.9)
    success_window = serializers.IntegerField(min_value=1, default=20)
    trend_windows = serializers.IntegerField(min_value=2, default=10)

    # [output]
    save_checkpoints = serializers.BooleanField(default=False)
    save_mistake_log = serializers.BooleanField(default=True)
    save_shields = serializers.BooleanField(default=True)

    def validate_shaping_sign(self, value):
        if value not in (-1.0, 1.0):
            raise serializers.ValidationError("shaping_sign must be -1 or +1")
        return value

    def validate_gamma(self, value):
        if value <= 0.0:
            raise serializers.ValidationError("gamma must be positive")
        return value

    def validate_bloom_target_fp(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("bloom_target_fp must lie strictly between 0 and 1")
        return value

    def validate_default_policy(self, value):
        if len(value) != 3:
            raise serializers.ValidationError("default_policy needs one probability per action (3)")
        if abs(sum(value) - 1.0) > 1e-9:
            raise serializers.ValidationError("default_policy must sum to 1")
        return value

    def validate(self, attrs):
        """Validation croisée protocole / champs"""
        protocol = attrs['protocol']

        if protocol == 'multi':
            if 'algorithm' in attrs:
                raise serializers.ValidationError({'algorithm': "algorithm is set by shield_mode in the multi protocol"})
            if 'shield_mode' not in attrs:
                raise serializers.ValidationError({'shield_mode': "shield_mode is required for the multi protocol"})
            attrs.setdefault('agent_count', DEFAULT_MULTI_AGENTS)
            attrs['algorithm'] = 'ppo' if attrs['shield_mode'] == 'none' else 'shieldppo'
        else:
            if 'shield_mode' in attrs:
                raise serializers.ValidationError({'shield_mode': "shield_mode is only valid for the multi protocol"})
            if attrs.get('agent_count', 1) != 1:
                raise serializers.ValidationError({'agent_count': f"the {protocol} protocol trains exactly one agent"})
            attrs['agent_count'] = 1
            attrs['shield_mode'] = 'none'
            attrs.setdefault('algorithm', 'shieldppo')
            if attrs['algorithm'] == 'shieldppo':
                attrs['shield_mode'] = 'individual'

        if protocol == 'goal':
            attrs.setdefault('layout', 'goal')
            attrs.setdefault('eval_every', DEFAULT_GOAL_EVAL_EVERY)
            if len(parse_layout(attrs['layout'], LAYOUT_MAPS[attrs['layout']]).goals) < 3:
                raise serializers.ValidationError({'layout': "the goal protocol needs a layout with 3 goals"})
        else:
            attrs.setdefault('layout', 'desk')
            attrs.setdefault('eval_every', 0)

        attrs.setdefault('tile_probability', None)
        attrs.setdefault('default_policy', None)
        return attrs


class EpisodeMetricSerializer(serializers.ModelSerializer):
    """Serializer pour les lignes de métriques"""

    class Meta:
        model = EpisodeMetric
        fields = [
            'episode', 'mean_return', 'mistake_count', 'step_count',
            'mistake_rate', 'repeated_mistake_count', 'goal_count'
        ]
        read_only_fields = fields


class ExperimentRunSerializer(serializers.ModelSerializer):
    """Serializer pour les runs archivés"""

    mistake_rate = serializers.FloatField(read_only=True)
    shield_count = serializers.SerializerMethodField()

    class Meta:
        model = ExperimentRun
        fields = [
            'id', 'name', 'protocol', 'seed', 'config', 'config_digest',
            'episode_count', 'total_steps', 'total_mistakes', 'repeated_mistakes',
            'mistake_rate', 'wall_clock_seconds', 'shield_count', 'created_at'
        ]
        read_only_fields = fields

    def get_shield_count(self, obj):
        return obj.shields.count()


class StoredShieldSerializer(serializers.ModelSerializer):
    """Résumé d'un bouclier archivé (sans le flux binaire)"""

    summary = serializers.SerializerMethodField()

    class Meta:
        model = StoredShield
        fields = ['id', 'name', 'variant', 'entry_count', 'summary', 'created_at']
        read_only_fields = fields

    def get_summary(self, obj):
        from shields.services import describe_shield
        return describe_shield(obj.load(), limit=self.context.get('limit', 20))
