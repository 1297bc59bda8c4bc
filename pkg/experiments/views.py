from django.shortcuts import get_object_or_404
from rest_framework import generics, permissions, status
from rest_framework.response import Response
from rest_framework.views import APIView
from dataclasses import asdict
import logging

from .models import ExperimentRun, EpisodeMetric
from .serializers import EpisodeMetricSerializer, ExperimentRunSerializer, StoredShieldSerializer
from .services import aggregate_stored_runs

logger = logging.getLogger(__name__)


class ExperimentRunListView(generics.ListAPIView):
    """Vue pour lister les runs archivés"""

    queryset = ExperimentRun.objects.all()
    serializer_class = ExperimentRunSerializer
    permission_classes = [permissions.AllowAny]
    filterset_fields = ['protocol', 'seed', 'name', 'config_digest']
    ordering_fields = ['created_at', 'seed', 'total_mistakes']


class ExperimentRunDetailView(generics.RetrieveAPIView):
    """Vue pour consulter un run archivé"""

    queryset = ExperimentRun.objects.all()
    serializer_class = ExperimentRunSerializer
    permission_classes = [permissions.AllowAny]


class EpisodeMetricListView(generics.ListAPIView):
    """Métriques par épisode d'un run"""

    serializer_class = EpisodeMetricSerializer
    permission_classes = [permissions.AllowAny]
    filterset_fields = ['episode']

    def get_queryset(self):
        run = get_object_or_404(ExperimentRun, pk=self.kwargs['run_id'])
        return EpisodeMetric.objects.filter(run=run).order_by('episode')


class RunShieldView(APIView):
    """Résumé des boucliers archivés d'un run"""

    permission_classes = [permissions.AllowAny]

    def get(self, request, run_id):
        run = get_object_or_404(ExperimentRun, pk=run_id)
        try:
            limit = int(request.query_params.get('limit', 20))
        except ValueError:
            return Response({'error': 'limit must be an integer'}, status=status.HTTP_400_BAD_REQUEST)
        serializer = StoredShieldSerializer(run.shields.all(), many=True, context={'limit': limit})
        return Response({'run': str(run.id), 'shields': serializer.data})


class RunSummaryView(APIView):
    """Agrégat entre graines des runs d'une même configuration (?digest=)"""

    permission_classes = [permissions.AllowAny]

    def get(self, request):
        digest = request.query_params.get('digest')
        if not digest:
            return Response({'error': 'the digest query parameter is required'}, status=status.HTTP_400_BAD_REQUEST)

        runs = list(ExperimentRun.objects.filter(config_digest=digest).prefetch_related('metrics'))
        if not runs:
            return Response({'error': f'no stored run with digest {digest}'}, status=status.HTTP_404_NOT_FOUND)

        table = aggregate_stored_runs(runs)
        total_steps = sum(run.total_steps for run in runs)
        total_mistakes = sum(run.total_mistakes for run in runs)
        return Response({
            'config_digest': table.digest,
            'seeds': table.seeds,
            'degenerate': table.degenerate,
            'totals': {
                'steps': total_steps,
                'mistakes': total_mistakes,
                'repeated_mistakes': sum(run.repeated_mistakes for run in runs),
                'mistake_rate': total_mistakes / total_steps if total_steps else 0.0,
            },
            'episodes': [asdict(row) for row in table.rows],
        })
