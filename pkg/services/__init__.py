"""
Review Harness Services Module
==============================

논문 리뷰 파이프라인과 SPECS 벤치마크의 서비스 계층

Services:
- ingest_service / ocr_backends: PDF 정규화, markdown 변환, PaperBundle
- model_gateway / model_backends: 재시도와 동시성 제한을 갖춘 모델 호출
- prompt_registry / review_pipeline_service / batch_service: 단계 실행, 체크포인트, 롤아웃 게이트
- review_quality_service / citation_service: 리뷰 구조 검사, 품질 critic, 인용 검증, 감독 보고서
- source_index / compile_gate / specs_curation_service: SPECS 데이터셋 구성
- specs_eval_service: 변형별 리뷰, 판정, 검출률, McNemar 검정
- survey_service: 설문 Likert 통계
- agents/: critic, judge, perturbation 에이전트

Usage:
    from services.ingest_service import ingest_paper
    from services.review_pipeline_service import ReviewPipeline, default_plan
    from services.batch_service import run_batch, approve_rollout
    from services.specs_eval_service import results_table
"""
