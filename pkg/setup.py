from setuptools import setup, find_packages

setup(
    name="biased_qkd",
    package_dir={"": "src"},
    packages=find_packages(where="src"),
    install_requires=[
        "langchain-core>=0.3.59",
        "langgraph>=0.4.2",
        "pydantic>=2.7",
        "numpy>=1.26",
        "scipy>=1.11",
        "pandas",
        "pyyaml",
        "python-dotenv",
        "rich",
        "typing_extensions",
    ],
    entry_points={"console_scripts": ["biased-qkd=biased_qkd.cli:main"]},
)
