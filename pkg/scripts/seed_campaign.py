"""
Write a desk-scale campaign config and initialize the results journal.
Run: python scripts/seed_campaign.py [--smoke]
Env:
  STRESSLAB_CAMPAIGN_DIR (optional; defaults to ./campaign)
"""
import os
import sys
import json
import argparse

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import CampaignConfig, Config  # noqa: E402
from services.campaign import CampaignPaths  # noqa: E402
from services.results_journal import ResultsJournal  # noqa: E402

CAMPAIGN_DIR = Config.STRESSLAB_CAMPAIGN_DIR

# Two seeds, tiny datasets and a narrow model: exercises every command in minutes.
SMOKE = {
    'seeds': {'count': 2},
    'datasets': {
        'n_train': 8,
        'n_test': 4,
        'problems': {
            'nls': {'size': 32},
            'ns': {'size': 16, 'solver_dt': 0.05},
            'ks': {'size': 32, 'length': 32.0},
            'black_scholes': {'size': 32, 'solver_dt': 0.01},
            'poisson': {'size': 17},
        },
    },
    'training': {'modes': 4, 'width': 8, 'hidden': 16, 'n_layers': 2, 'max_epochs': 5, 'batch_size': 4},
    'scenarios': {'n_instances': 3, 'n_draws': 2},
}


def main():
    parser = argparse.ArgumentParser(description='Write a campaign config and initialize the journal')
    parser.add_argument('--smoke', action='store_true', help='Minutes-scale config instead of the desk defaults')
    args = parser.parse_args()

    payload = dict(SMOKE) if args.smoke else {}
    payload['campaign_dir'] = CAMPAIGN_DIR
    cfg = CampaignConfig.model_validate(payload)

    os.makedirs(CAMPAIGN_DIR, exist_ok=True)
    config_path = os.path.join(CAMPAIGN_DIR, 'campaign.json')
    with open(config_path, 'w', encoding='utf-8') as fh:
        json.dump(cfg.model_dump(mode='json', exclude_defaults=True), fh, indent=2, sort_keys=True)
        fh.write('\n')

    paths = CampaignPaths(cfg.root())
    ResultsJournal(paths.journal)
    print(f"Wrote {config_path} and initialized {paths.journal} (WAL mode enabled)")


if __name__ == '__main__':
    main()
