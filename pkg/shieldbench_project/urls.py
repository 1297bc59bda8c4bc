"""
URL configuration for shieldbench_project project.

Seule l'API de consultation des runs archivés est exposée ; les expériences
se lancent avec ``python manage.py shieldbench run``.
"""
from django.contrib import admin
from django.urls import path, include
from rest_framework import permissions
from rest_framework.decorators import api_view, permission_classes
from rest_framework.response import Response


@api_view(['GET'])
@permission_classes([permissions.AllowAny])
def api_root(request):
    """API root endpoint with available endpoints"""
    return Response({
        'message': 'Shieldbench results API',
        'version': '1.0',
        'endpoints': {
            'runs': '/api/runs/',
            'run_detail': '/api/runs/<uuid>/',
            'run_metrics': '/api/runs/<uuid>/metrics/',
            'run_shield': '/api/runs/<uuid>/shield/',
            'summary': '/api/runs/summary/?digest=<sha256>',
        },
        'admin': '/admin/',
    })


@api_view(['GET'])
@permission_classes([permissions.AllowAny])
def health_check_view(request):
    """Health check endpoint"""
    return Response({'status': 'healthy'}, status=200)


urlpatterns = [
    path('admin/', admin.site.urls),
    path('api/', api_root, name='api_root'),
    path('api/', include('experiments.urls')),
    path('health/', health_check_view, name='health_check'),
]
