from setuptools import setup, find_packages

setup(
    name="toxic_spans",
    version="0.1.0",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    include_package_data=True,
    install_requires=[
        "requests>=2.25.0",
        "python-dotenv>=0.21.0",
        "pyyaml>=6.0",
        "numpy>=1.22",
        "pandas>=1.4",
        "torch>=1.13",
        "transformers>=4.30",
        "tqdm>=4.64",
    ],
    entry_points={
        "console_scripts": [
            "toxic-spans=toxic_spans.cli:main",
        ],
    },
    python_requires=">=3.9",
)
