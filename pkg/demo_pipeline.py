#!/usr/bin/env python3
"""
Demo of the complete toy PeSFT -> PeRPO pipeline
"""
import logging

import matplotlib.pyplot as plt

from pipeline.config import load_train_config
from pipeline.main_pipeline import ToyTrainingPipeline
from pipeline.tasks import action_plan
from render.executor import run_trajectory_render


def main():
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    print("="*60)
    print("OMNI ENGINE TOY TRAINING DEMO")
    print("="*60)
    print()

    cfg = load_train_config('config.yaml')
    pipeline = ToyTrainingPipeline(cfg)

    print("Training (PeSFT then PeRPO)...")
    report = pipeline.train(output_dir='outputs')
    print()

    pipeline.print_results(report)

    # Visualize
    print("\nGenerating visualization...")
    pesft = [m for m in report['metrics'] if m['stage'] == 'pesft']
    perpo = [m for m in report['metrics'] if m['stage'] == 'perpo']

    task = pipeline.tasks[0]
    actions = [a for _, a in action_plan(task)]
    frames = run_trajectory_render(task.init_image, actions)

    fig, axes = plt.subplots(1, 3, figsize=(18, 5))

    axes[0].plot([m['ce'] for m in pesft], label='CE')
    axes[0].plot([m['pe'] for m in pesft], label='Perception')
    axes[0].set_title('PeSFT losses')
    axes[0].set_xlabel('step')
    axes[0].legend()

    axes[1].plot([m['reward'] for m in perpo], label='Reward')
    axes[1].plot([m['acc'] for m in perpo], label='R_Acc')
    axes[1].plot([m['pe'] for m in perpo], label='R_Pe')
    axes[1].set_title('PeRPO rollout rewards')
    axes[1].set_xlabel('step')
    axes[1].legend()

    axes[2].imshow(frames[-1])
    axes[2].set_title(f'{task.question}\n(answer {task.gold})', fontsize=9)
    axes[2].axis('off')

    plt.suptitle('Toy Interleaved Reasoning Training', fontsize=14)
    plt.tight_layout()
    plt.savefig('outputs/training.png', dpi=100)
    plt.show()

    print("\nDemo completed!")
    print("Outputs saved to: outputs/")

    return 0


if __name__ == "__main__":
    exit(main())
