from django.urls import path
from . import views

app_name = 'experiments'

urlpatterns = [
    # Routes spécifiques AVANT les routes avec paramètres
    path('runs/', views.ExperimentRunListView.as_view(), name='run_list'),
    path('runs/summary/', views.RunSummaryView.as_view(), name='run_summary'),

    path('runs/<uuid:pk>/', views.ExperimentRunDetailView.as_view(), name='run_detail'),
    path('runs/<uuid:run_id>/metrics/', views.EpisodeMetricListView.as_view(), name='run_metrics'),
    path('runs/<uuid:run_id>/shield/', views.RunShieldView.as_view(), name='run_shield'),
]
